//! Acceptance run. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use cehr_core::cohort::{build_cohort, gap_signal};
use cehr_core::harness::*;
use cehr_core::model::{FitConfig, ModelConfig, PretrainConfig};
use cehr_core::sequence::{VisitTypes, Vocabulary};
use cehr_core::synth::{generate_synthetic, SynthConfig};

const SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let checks: Vec<common::Check> = common::op_checks().into_iter().chain(common::model_checks()).collect();
    let secs = t.elapsed().as_secs_f64();
    let bad: Vec<String> = checks.iter().filter(|c| !c.ok()).map(|c| format!("{} {:.1e}", c.name, c.err)).collect();
    let worst = checks.iter().map(|c| c.err).fold(0.0, f64::max);
    outcome(
        bad.is_empty() && secs < 120.0,
        format!("{} checks, worst rel err {worst:.1e}, {secs:.1}s {bad:?}", checks.len()),
    )
}

fn tokenizer() -> Outcome {
    let t = Instant::now();
    let cfg = SynthConfig {
        n_patients: 10_000,
        ..Default::default()
    };
    let store = generate_synthetic(&cfg, 42).unwrap();
    let (v, checked) = common::store_violations(&store, 42);
    let secs = t.elapsed().as_secs_f64();
    outcome(
        v.is_empty() && checked == 40_000 && secs < 60.0,
        format!("{checked} sequences, {} violations, {secs:.1}s {:?}", v.len(), &v[..v.len().min(3)]),
    )
}

fn att_table() -> Outcome {
    let bad = common::att_mismatches();
    outcome(bad.is_empty(), format!("401 intervals, {} mismatches {:?}", bad.len(), &bad[..bad.len().min(3)]))
}

fn metric_oracles() -> Outcome {
    let t = Instant::now();
    let worst = common::metric_worst(500);
    let pca_bad = common::pca_mismatches(200, 1e-8);
    let secs = t.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-12 && pca_bad == 0 && secs < 60.0,
        format!("metric max diff {worst:.1e}, PCA mismatches {pca_bad}/200, {secs:.1}s"),
    )
}

fn masking() -> Outcome {
    let st = common::masking_stats(10_000, true, 7);
    let [m, r, u] = st.fractions();
    let ok = st.maskable >= 10_000
        && (st.mlm_rate() - 0.15).abs() <= 0.01
        && (m - 0.8).abs() <= 0.02
        && (r - 0.1).abs() <= 0.02
        && (u - 0.1).abs() <= 0.02
        && (st.vtp_rate() - 0.5).abs() <= 0.02
        && st.typed >= 10_000
        && st.pad_selected == 0
        && st.untyped_selected == 0;
    outcome(
        ok,
        format!(
            "MLM {:.4} over {} (mask {m:.3} random {r:.3} keep {u:.3}), VTP {:.4} over {}, pad {} untyped {}",
            st.mlm_rate(),
            st.maskable,
            st.vtp_rate(),
            st.typed,
            st.pad_selected,
            st.untyped_selected
        ),
    )
}

/// Mean test AUCs of one seed of the planted experiment.
struct Planted {
    cehr: f64,
    medbert: f64,
    control: f64,
    few_05: f64,
    few_80: f64,
    nested: bool,
    ablation_secs: f64,
}

fn planted(seed: u64) -> Planted {
    let t = Instant::now();
    let cfg = SynthConfig {
        n_patients: 2000,
        ..Default::default()
    };
    let store = generate_synthetic(&cfg, seed).unwrap();
    let vocab = Vocabulary::from_store(&store).unwrap();
    let types = VisitTypes::default();
    let data = ExperimentData {
        store: &store,
        vocab: &vocab,
        types: &types,
    };
    let task = Task {
        name: "gap_signal".into(),
        examples: build_cohort(&store, &gap_signal(&cfg)).unwrap(),
    };
    let labels = task.labels();
    let plan = make_folds(&labels, seed, true).unwrap();
    let base = ModelConfig {
        n_layers: 2,
        n_heads: 4,
        d_model: 64,
        d_ff: 256,
        vocab_size: vocab.len(),
        seed,
        ..Default::default()
    };
    let pre = PretrainConfig {
        epochs: 3,
        batch_size: 8,
        lr: 1e-3,
        seed,
        ..Default::default()
    };
    let fit = FitConfig {
        max_epochs: 10,
        patience: 1,
        batch_size: 16,
        lr: 5e-4,
        seed,
    };
    let opts = RunOptions {
        seed,
        ..Default::default()
    };
    let auc = |row: Ablation, weights, fraction| {
        let spec = cehr_spec(row, &base, weights, &fit);
        run_experiment(data, &task, &spec, &plan, fraction, &opts).unwrap().auc().0
    };
    let cehr_w = pretrain_variant(data, Ablation::CehrBert, &base, &pre).unwrap();
    let cehr = auc(Ablation::CehrBert, cehr_w.clone(), 1.0);
    let medbert = auc(Ablation::MBert, pretrain_variant(data, Ablation::MBert, &base, &pre).unwrap(), 1.0);
    let control = auc(Ablation::RBert, None, 1.0);
    let ablation_secs = t.elapsed().as_secs_f64();

    let mut nested = true;
    for (f, split) in plan.folds.iter().enumerate() {
        let s = seed.wrapping_add(f as u64);
        let all = few_shot_plan(&split.train, &labels, &FEW_SHOT_FRACTIONS, s, false).unwrap();
        nested &= all.windows(2).all(|w| w[0].iter().all(|i| w[1].contains(i)));
        for (k, &frac) in FEW_SHOT_FRACTIONS.iter().enumerate() {
            nested &= few_shot_plan(&split.train, &labels, &[frac], s, false).unwrap()[0] == all[k];
        }
    }
    Planted {
        cehr,
        medbert,
        control,
        few_05: auc(Ablation::CehrBert, cehr_w.clone(), 0.05),
        few_80: auc(Ablation::CehrBert, cehr_w, 0.80),
        nested,
        ablation_secs,
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn planted_criteria() -> [Outcome; 3] {
    let runs: Vec<Planted> = SEEDS
        .iter()
        .map(|&s| {
            let p = planted(s);
            println!(
                "      seed {s}: CEHR {:.4} M-BERT {:.4} R-BERT {:.4} few-shot 0.05 {:.4} 0.80 {:.4} ({:.0}s ablation)",
                p.cehr, p.medbert, p.control, p.few_05, p.few_80, p.ablation_secs
            );
            p
        })
        .collect();
    let cehr = mean(runs.iter().map(|p| p.cehr));
    let medbert = mean(runs.iter().map(|p| p.medbert));
    let control = mean(runs.iter().map(|p| p.control));
    let (f05, f80) = (mean(runs.iter().map(|p| p.few_05)), mean(runs.iter().map(|p| p.few_80)));
    let secs: f64 = runs.iter().map(|p| p.ablation_secs).sum();
    let nested = runs.iter().all(|p| p.nested);
    [
        outcome(
            cehr - medbert >= 0.05 && cehr >= 0.6 && medbert >= 0.6 && secs < 1800.0,
            format!("CEHR {cehr:.4} vs MEDBERT-style {medbert:.4} (diff {:.4}), {secs:.0}s", cehr - medbert),
        ),
        outcome(
            cehr - control >= 0.03,
            format!("CEHR {cehr:.4} vs unpretrained {control:.4} (diff {:.4})", cehr - control),
        ),
        outcome(
            nested && f80 >= f05 - 0.02,
            format!("nested {nested}, AUC at 0.80 {f80:.4} vs 0.05 {f05:.4}"),
        ),
    ]
}

fn cohort_fixture() -> Outcome {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/cohort12");
    let bad = common::fixture_mismatches(&dir);
    let rows = fs::read_to_string(dir.join("expected.csv")).unwrap().lines().count() - 1;
    outcome(bad.is_empty(), format!("{rows} expected rows, {} mismatched runs {bad:?}", bad.len()))
}

fn cli_run(dir: &Path) -> Result<Vec<u8>, String> {
    let cfg = dir.join("c.toml");
    fs::create_dir_all(dir).map_err(|e| e.to_string())?;
    fs::write(
        &cfg,
        "seed = 11\n[synth]\nn_patients = 300\n[model]\nn_layers = 1\nn_heads = 2\nd_model = 16\nd_ff = 32\n\
         k = 4\nlstm_hidden = 8\n[pretrain]\nepochs = 1\nbatch_size = 16\n[finetune]\nmax_epochs = 2\n",
    )
    .map_err(|e| e.to_string())?;
    let out = dir.join("run");
    let o: PathBuf = out.clone();
    for cmd in ["synth", "pretrain", "evaluate"] {
        let r = Command::new(env!("CARGO_BIN_EXE_cehr"))
            .args([cmd, "--config", cfg.to_str().unwrap(), "--out", o.to_str().unwrap()])
            .output()
            .map_err(|e| e.to_string())?;
        if !r.status.success() {
            return Err(format!("{cmd}: {}", String::from_utf8_lossy(&r.stderr).trim()));
        }
    }
    fs::read(out.join("metrics.csv")).map_err(|e| e.to_string())
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    match (cli_run(&tmp.path().join("a")), cli_run(&tmp.path().join("b"))) {
        (Ok(a), Ok(b)) => outcome(a == b && !a.is_empty(), format!("metrics.csv {} bytes, identical: {}", a.len(), a == b)),
        (a, b) => outcome(false, format!("{:?} {:?}", a.err(), b.err())),
    }
}

fn main() -> ExitCode {
    let start = Instant::now();
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report = |n: usize, name: &'static str, o: Outcome| {
        println!("{} {n:>2}. {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };
    report(1, "gradient suite", gradients());
    report(2, "tokenizer properties", tokenizer());
    report(3, "interval token table", att_table());
    report(4, "metric and PCA oracles", metric_oracles());
    report(5, "masking statistics", masking());
    let [ablation, pretraining, few_shot] = planted_criteria();
    report(6, "planted-signal ablation", ablation);
    report(7, "pretraining beats the unpretrained control", pretraining);
    report(8, "few-shot nesting and trend", few_shot);
    report(9, "cohort fixture", cohort_fixture());
    report(10, "end-to-end determinism", determinism());
    let failed = results.iter().filter(|r| !r.2.pass).count();
    println!(
        "acceptance: {} passed, {failed} failed, {:.0}s",
        results.len() - failed,
        start.elapsed().as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
