use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use cehr_core::baselines::EmbeddingInit;
use cehr_core::cohort::{build_cohort, gap_signal, shipped, shipped_names, CohortDefinition, Hierarchy};
use cehr_core::event_store::{summary_stats, EventStore, LoadOptions};
use cehr_core::harness::{
    ablation_matrix, att_pca, att_pca_csv, cehr_spec, few_shot_plan, lengths_csv, make_folds, metrics_csv,
    pr_auc, report_md, roc_auc, run_experiment, sequence_length_report, task_sequences, Ablation, AblationBudget,
    ExperimentData, MetricReport, ModelSpec, RunOptions, Task,
};
use cehr_core::model::{
    fit, loss_trace_csv, predict, pretrain, pretraining_sequences, CehrModel, FitConfig, ModelConfig,
};
use cehr_core::sequence::{Variant, VisitTypes, Vocabulary};
use cehr_core::synth::{generate_synthetic, hierarchy_csv};
use cehr_tensor::{weights, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::{Choice, RunConfig};
use crate::{Command, Exit};

pub fn run(cmd: Command, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    write(cfg, "config.resolved.toml", &cfg.to_toml())?;
    match cmd {
        Command::Synth => synth(cfg),
        Command::Stats => stats(cfg),
        Command::Pretrain => pretrain_cmd(cfg),
        Command::Finetune => finetune(cfg),
        Command::Evaluate => evaluate(cfg, &[cfg.fraction], "Evaluation"),
        Command::Fewshot => evaluate(cfg, &cfg.harness.fractions, "Few-shot evaluation"),
        Command::Ablate => ablate(cfg),
        Command::VizAtt => viz_att(cfg),
        Command::Lengths => lengths(cfg),
        Command::Params => params(cfg),
    }
}

fn write(cfg: &RunConfig, name: &str, body: &str) -> Result<()> {
    let p = cfg.out.join(name);
    fs::write(&p, body).with_context(|| format!("writing {}", p.display()))
}

fn require(p: &Path) -> Result<()> {
    if p.exists() {
        Ok(())
    } else {
        Err(Exit::missing(p).into())
    }
}

fn load_store(cfg: &RunConfig) -> Result<EventStore> {
    let dir = cfg.data_dir();
    for f in ["persons.csv", "visits.csv", "events.csv"] {
        require(&dir.join(f))?;
    }
    Ok(EventStore::load_dir(&dir, &LoadOptions::default())?)
}

/// Store, vocabulary and visit types for a run. The vocabulary comes from
/// `vocab.csv` beside the checkpoint when there is one.
struct Loaded {
    store: EventStore,
    vocab: Vocabulary,
    types: VisitTypes,
}

impl Loaded {
    fn new(cfg: &RunConfig, vocab_file: Option<&Path>) -> Result<Self> {
        let store = load_store(cfg)?;
        let vocab = match vocab_file {
            Some(p) if p.exists() => Vocabulary::read(p)?,
            _ => Vocabulary::from_store(&store)?,
        };
        Ok(Self {
            store,
            vocab,
            types: VisitTypes::default(),
        })
    }

    fn data(&self) -> ExperimentData<'_> {
        ExperimentData {
            store: &self.store,
            vocab: &self.vocab,
            types: &self.types,
        }
    }

    fn base_model(&self, cfg: &RunConfig) -> ModelConfig {
        ModelConfig {
            vocab_size: self.vocab.len(),
            ..cfg.model.clone()
        }
    }
}

fn definition(cfg: &RunConfig, extra: &[CohortDefinition], name: &str) -> Option<CohortDefinition> {
    if name == "gap_signal" {
        return Some(gap_signal(&cfg.synth));
    }
    if let Some(d) = extra.iter().find(|d| d.name == name) {
        return Some(d.clone());
    }
    shipped_names().contains(&name).then(|| shipped(name).expect("bundled definitions compile"))
}

fn tasks(cfg: &RunConfig, store: &EventStore) -> Result<Vec<Task>> {
    let mut extra = Vec::new();
    for p in &cfg.cohorts {
        require(p)?;
        extra.push(CohortDefinition::load(p)?);
    }
    let unknown: Vec<&str> = cfg
        .tasks
        .iter()
        .filter(|t| definition(cfg, &extra, t).is_none())
        .map(String::as_str)
        .collect();
    if !unknown.is_empty() {
        let mut known: Vec<String> = vec!["gap_signal".into()];
        known.extend(shipped_names().iter().map(|s| s.to_string()));
        known.extend(extra.iter().map(|d| d.name.clone()));
        return Err(Exit::config(vec![format!(
            "unknown task(s) {} (known: {})",
            unknown.join(", "),
            known.join(", ")
        )])
        .into());
    }
    cfg.tasks
        .iter()
        .map(|name| {
            let mut def = definition(cfg, &extra, name).expect("checked above");
            if let Some(d) = cfg.harness.observation_days {
                def = def.with_observation_window(Some(d));
            }
            let examples = build_cohort(store, &def).with_context(|| format!("building cohort {name}"))?;
            Ok(Task {
                name: name.clone(),
                examples,
            })
        })
        .collect()
}

fn encoder_row(cfg: &RunConfig) -> Result<Ablation> {
    match cfg.choice() {
        Choice::Encoder(r) => Ok(r),
        _ => bail!("{} has no encoder; this command needs an encoder variant", cfg.variant),
    }
}

/// Written beside pretrained weights so a checkpoint can be checked
/// against the configuration that loads it.
#[derive(Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    variant: String,
    model: ModelConfig,
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).join(name)
}

/// Loads the checkpoint for `row` into a fresh model built from the run
/// configuration.
fn load_encoder(cfg: &RunConfig, loaded: &Loaded, row: Ablation) -> Result<CehrModel> {
    let path = cfg.checkpoint_path();
    require(&path)?;
    let mcfg = row.model_config(&loaded.base_model(cfg));
    let meta_path = sibling(&path, "model.toml");
    if meta_path.exists() {
        let meta: CheckpointMeta = toml::from_str(&fs::read_to_string(&meta_path)?)
            .with_context(|| format!("reading {}", meta_path.display()))?;
        if meta.variant != row.name() {
            bail!("checkpoint {} holds {}, not {}", path.display(), meta.variant, row.name());
        }
        let same = ModelConfig {
            seed: mcfg.seed,
            ..meta.model
        } == mcfg;
        if !same {
            bail!("checkpoint {} was trained with a different model config", path.display());
        }
    }
    let mut model = CehrModel::new(mcfg)?;
    weights::load_into(&mut model.params, &path).with_context(|| format!("loading {}", path.display()))?;
    Ok(model)
}

fn pretrained_weights(cfg: &RunConfig, loaded: &Loaded, row: Ablation) -> Result<Option<Arc<Vec<Tensor>>>> {
    if !row.spec().3 {
        return Ok(None);
    }
    Ok(Some(Arc::new(load_encoder(cfg, loaded, row)?.params.snapshot())))
}

fn vocab_beside_checkpoint(cfg: &RunConfig) -> Option<PathBuf> {
    match cfg.choice() {
        Choice::Encoder(r) if r.spec().3 => Some(sibling(&cfg.checkpoint_path(), "vocab.csv")),
        _ => None,
    }
}

fn options(cfg: &RunConfig) -> RunOptions {
    RunOptions {
        seed: cfg.seed,
        independent_few_shot: cfg.harness.independent_few_shot,
        jobs: cfg.jobs,
    }
}

fn synth(cfg: &RunConfig) -> Result<()> {
    let store = generate_synthetic(&cfg.synth, cfg.seed)?;
    store.write_dir(&cfg.out)?;
    write(cfg, "hierarchy.csv", &hierarchy_csv(&cfg.synth))?;
    println!(
        "wrote {} patients, {} visits, {} events to {}",
        store.len(),
        store.n_visits(),
        store.n_events(),
        cfg.out.display()
    );
    Ok(())
}

fn stats(cfg: &RunConfig) -> Result<()> {
    let store = load_store(cfg)?;
    let s = summary_stats(&store)?;
    let csv = s.to_csv();
    write(cfg, "stats.csv", &csv)?;
    println!("{} patients\n{csv}", s.n_patients);
    Ok(())
}

fn pretrain_cmd(cfg: &RunConfig) -> Result<()> {
    let row = encoder_row(cfg)?;
    let (variant, _, _, pretrained) = row.spec();
    if !pretrained {
        bail!("{} is the unpretrained control and has nothing to pretrain", row.name());
    }
    let loaded = Loaded::new(cfg, None)?;
    let mcfg = row.model_config(&loaded.base_model(cfg));
    let mut model = CehrModel::new(mcfg.clone())?;
    let seqs = pretraining_sequences(&loaded.store, variant, &loaded.vocab, &loaded.types, cfg.pretrain.min_events)?;
    let trace = pretrain(&mut model, &seqs, &cfg.pretrain, Some(&cfg.out.join("checkpoints")))?;
    weights::save(&model.params, &cfg.out.join("model.cehrw"))?;
    loaded.vocab.write(&cfg.out.join("vocab.csv"))?;
    let meta = CheckpointMeta {
        variant: row.name().into(),
        model: mcfg,
    };
    write(cfg, "model.toml", &toml::to_string(&meta)?)?;
    write(cfg, "loss_trace.csv", &loss_trace_csv(&trace))?;
    println!(
        "pretrained {} on {} sequences, {} steps, final MLM loss {:.4}",
        row.name(),
        seqs.len(),
        trace.len(),
        trace.last().map_or(f64::NAN, |r| r.mlm_loss)
    );
    Ok(())
}

fn finetune(cfg: &RunConfig) -> Result<()> {
    let row = encoder_row(cfg)?;
    let loaded = Loaded::new(cfg, vocab_beside_checkpoint(cfg).as_deref())?;
    let weights_in = pretrained_weights(cfg, &loaded, row)?;
    let mcfg = row.model_config(&loaded.base_model(cfg));
    for task in tasks(cfg, &loaded.store)? {
        let labels = task.labels();
        let plan = make_folds(&labels, cfg.seed, cfg.harness.stratified)?;
        let split = &plan.folds[0];
        let train = if cfg.fraction < 1.0 {
            few_shot_plan(&split.train, &labels, &[cfg.fraction], cfg.seed, cfg.harness.independent_few_shot)?.remove(0)
        } else {
            split.train.clone()
        };
        let seqs = task_sequences(loaded.data(), &task, row.spec().0, mcfg.context_window)?;
        let lab = |idx: &[usize]| idx.iter().map(|&i| (seqs[i].clone(), labels[i] as f64)).collect::<Vec<_>>();
        let mut model = CehrModel::new(mcfg.clone())?;
        if let Some(w) = &weights_in {
            model.params.restore(w);
        }
        let fcfg = FitConfig {
            seed: cfg.seed,
            ..cfg.finetune.clone()
        };
        let report = fit(&mut model, &lab(&train), &lab(&split.val), &fcfg)?;
        let test: Vec<_> = split.test.iter().map(|&i| seqs[i].clone()).collect();
        let scores = predict(&model, &test, fcfg.batch_size)?;
        let test_labels: Vec<u8> = split.test.iter().map(|&i| labels[i]).collect();

        weights::save(&model.params, &cfg.out.join(format!("{}_finetuned.cehrw", task.name)))?;
        let mut preds = String::from("person_id,index_date,label,score\n");
        for (&i, s) in split.test.iter().zip(&scores) {
            let ex = &task.examples[i];
            let _ = writeln!(preds, "{},{},{},{:.17}", ex.person_id, ex.index_date, ex.label, s);
        }
        write(cfg, &format!("{}_predictions.csv", task.name), &preds)?;
        let mut hist = String::from("epoch,train_loss,val_loss\n");
        for (e, (t, v)) in report.train_losses.iter().zip(&report.val_losses).enumerate() {
            let _ = writeln!(hist, "{},{t:.17},{v:.17}", e + 1);
        }
        write(cfg, &format!("{}_fit.csv", task.name), &hist)?;
        println!(
            "{}: {} train / {} test, best epoch {}, stopped at {}, test AUC {:.4}, PR AUC {:.4}",
            task.name,
            train.len(),
            test.len(),
            report.best_epoch,
            report.stop_epoch,
            roc_auc(&scores, &test_labels)?,
            pr_auc(&scores, &test_labels)?
        );
    }
    Ok(())
}

fn hierarchy(cfg: &RunConfig) -> Result<Hierarchy> {
    match &cfg.hierarchy {
        Some(p) => {
            require(p)?;
            Ok(Hierarchy::load(p)?)
        }
        None => {
            let p = cfg.data_dir().join("hierarchy.csv");
            if p.exists() {
                Ok(Hierarchy::load(&p)?)
            } else {
                Ok(Hierarchy::from_pairs(Vec::new()))
            }
        }
    }
}

fn spec(cfg: &RunConfig, loaded: &Loaded) -> Result<ModelSpec> {
    Ok(match cfg.choice() {
        Choice::Encoder(row) => {
            let w = pretrained_weights(cfg, loaded, row)?;
            cehr_spec(row, &loaded.base_model(cfg), w, &cfg.finetune)
        }
        Choice::Logistic => ModelSpec::Logistic {
            config: cfg.logistic.clone(),
            hierarchy: Arc::new(hierarchy(cfg)?),
        },
        Choice::BiLstm => {
            let init = match &cfg.embeddings {
                Some(p) => {
                    require(p)?;
                    EmbeddingInit::File(p.clone())
                }
                None => EmbeddingInit::Random,
            };
            ModelSpec::BiLstm {
                config: cfg.bilstm.clone(),
                init,
                fit: cfg.finetune.clone(),
            }
        }
    })
}

fn print_reports(reports: &[MetricReport]) {
    for r in reports {
        println!("{} {} fraction {}: AUC {} PR AUC {}", r.task, r.model, r.fraction, r.auc_cell(), r.pr_auc_cell());
    }
}

fn evaluate(cfg: &RunConfig, fractions: &[f64], title: &str) -> Result<()> {
    let loaded = Loaded::new(cfg, vocab_beside_checkpoint(cfg).as_deref())?;
    let spec = spec(cfg, &loaded)?;
    let opts = options(cfg);
    let mut reports = Vec::new();
    for task in tasks(cfg, &loaded.store)? {
        let plan = make_folds(&task.labels(), cfg.seed, cfg.harness.stratified)
            .with_context(|| format!("splitting {}", task.name))?;
        for &f in fractions {
            reports.push(run_experiment(loaded.data(), &task, &spec, &plan, f, &opts)?);
        }
    }
    write(cfg, "metrics.csv", &metrics_csv(&reports))?;
    write(cfg, "report.md", &report_md(title, &reports))?;
    print_reports(&reports);
    Ok(())
}

fn ablate(cfg: &RunConfig) -> Result<()> {
    let loaded = Loaded::new(cfg, None)?;
    let mut tp = Vec::new();
    for task in tasks(cfg, &loaded.store)? {
        let plan = make_folds(&task.labels(), cfg.seed, cfg.harness.stratified)
            .with_context(|| format!("splitting {}", task.name))?;
        tp.push((task, plan));
    }
    let budget = AblationBudget {
        model: loaded.base_model(cfg),
        pretrain: cfg.pretrain.clone(),
        fit: cfg.finetune.clone(),
        fraction: cfg.fraction,
    };
    let reports = ablation_matrix(loaded.data(), &tp, &Ablation::ALL, &budget, &options(cfg))?;
    write(cfg, "metrics.csv", &metrics_csv(&reports))?;
    write(cfg, "report.md", &report_md("Ablation", &reports))?;
    print_reports(&reports);
    Ok(())
}

fn viz_att(cfg: &RunConfig) -> Result<()> {
    let row = encoder_row(cfg)?;
    let loaded = Loaded::new(cfg, Some(&sibling(&cfg.checkpoint_path(), "vocab.csv")))?;
    let model = load_encoder(cfg, &loaded, row)?;
    let rows = att_pca(&model, &loaded.vocab)?;
    write(cfg, "att_pca.csv", &att_pca_csv(&rows))?;
    println!("wrote {} token coordinates", rows.len());
    Ok(())
}

fn lengths(cfg: &RunConfig) -> Result<()> {
    let loaded = Loaded::new(cfg, None)?;
    let tasks = tasks(cfg, &loaded.store)?;
    let rows = sequence_length_report(loaded.data(), &tasks, &Variant::ALL)?;
    let csv = lengths_csv(&rows);
    write(cfg, "lengths.csv", &csv)?;
    print!("{csv}");
    Ok(())
}

fn params(cfg: &RunConfig) -> Result<()> {
    let loaded = Loaded::new(cfg, None)?;
    let base = loaded.base_model(cfg);
    let mut csv = String::from("model,n_params\n");
    for row in Ablation::ALL {
        let m = CehrModel::new(row.model_config(&base))?;
        let _ = writeln!(csv, "{},{}", row.name(), m.num_params());
    }
    write(cfg, "params.csv", &csv)?;
    print!("{csv}");
    Ok(())
}
