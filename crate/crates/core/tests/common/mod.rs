//! Oracles shared by the core integration tests and the acceptance run.
#![allow(dead_code)]

use std::path::Path;

use cehr_core::cohort::{build_cohort, shipped};
use cehr_core::event_store::{EventStore, LoadOptions, DATE_FMT};
use cehr_core::harness::{pca_2d, pr_auc, roc_auc};
use cehr_core::model::{Batch, CehrModel, EmbeddingMode, ModelConfig, PretrainTargets};
use cehr_core::sequence::*;
use cehr_core::synth::{generate_synthetic, SynthConfig};
use cehr_tensor::gradcheck::{check_inputs, check_params, CheckOptions};
use cehr_tensor::{init, BiLstm, ParamStore, Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const LINEAR_TOL: f64 = 1e-6;
pub const TOL: f64 = 1e-4;

/// Hand-written interval table: inclusive day ranges and their tokens.
pub const ATT_TABLE: [(i64, i64, &str); 16] = [
    (0, 6, "W0"),
    (7, 13, "W1"),
    (14, 20, "W2"),
    (21, 27, "W3"),
    (28, 59, "M1"),
    (60, 89, "M2"),
    (90, 119, "M3"),
    (120, 149, "M4"),
    (150, 179, "M5"),
    (180, 209, "M6"),
    (210, 239, "M7"),
    (240, 269, "M8"),
    (270, 299, "M9"),
    (300, 329, "M10"),
    (330, 365, "M11"),
    (366, i64::MAX, "LT"),
];

pub fn att_expected(days: i64) -> &'static str {
    ATT_TABLE.iter().find(|(lo, hi, _)| (*lo..=*hi).contains(&days)).unwrap().2
}

/// Mismatches between `att_token` and the hand table over 0..=400 days.
pub fn att_mismatches() -> Vec<String> {
    let vocab = Vocabulary::from_concepts(["x"]).unwrap();
    (0..=400)
        .filter_map(|d| {
            let got = vocab.token(att_token(d).unwrap());
            (got != att_expected(d)).then(|| format!("{d} days: got {got}, want {}", att_expected(d)))
        })
        .collect()
}

fn is_att(t: u32) -> bool {
    (W0..=LT).contains(&t)
}

/// Every broken structural invariant of an unwindowed sequence built from
/// `n_visits` non-empty visits holding `n_events` events.
pub fn sequence_violations(seq: &TokenSequence, variant: Variant, n_visits: usize, n_events: usize) -> Vec<String> {
    let mut v = Vec::new();
    let n = seq.len();
    let lens = [seq.time_years.len(), seq.age_years.len(), seq.visit_segment.len(), seq.visit_type_ids.len(), seq.attention_mask.len()];
    if lens.iter().any(|&l| l != n) {
        v.push(format!("channel lengths {lens:?} differ from {n}"));
        return v;
    }
    let count = |f: &dyn Fn(u32) -> bool| seq.token_ids.iter().filter(|&&t| f(t)).count();
    let (vs, ve, att, sep) = (count(&|t| t == VS), count(&|t| t == VE), count(&|t| is_att(t)), count(&|t| t == SEP));
    let gaps = n_visits - 1;
    let (want_len, want) = match variant {
        Variant::Cehr => (n_events + 2 * n_visits + gaps, (n_visits, n_visits, gaps, 0)),
        Variant::NoVsVe => (n_events + gaps, (0, 0, gaps, 0)),
        Variant::BehrtStyle => (n_events + gaps, (0, 0, 0, gaps)),
        Variant::MedbertStyle => (n_events, (0, 0, 0, 0)),
    };
    if n != want_len {
        v.push(format!("length {n}, want {want_len}"));
    }
    if (vs, ve, att, sep) != want {
        v.push(format!("VS/VE/ATT/SEP counts {:?}, want {want:?}", (vs, ve, att, sep)));
    }
    if variant == Variant::Cehr {
        // VS opens, VE closes, ATT only between VE and the next VS
        let mut open = false;
        for (i, &t) in seq.token_ids.iter().enumerate() {
            match t {
                VS if open => v.push(format!("nested VS at {i}")),
                VS => open = true,
                VE if !open => v.push(format!("VE without VS at {i}")),
                VE => open = false,
                t if is_att(t) => {
                    if open || i == 0 || seq.token_ids[i - 1] != VE || seq.token_ids.get(i + 1) != Some(&VS) {
                        v.push(format!("ATT at {i} not between VE and VS"));
                    }
                }
                _ if !open => v.push(format!("concept outside a visit at {i}")),
                _ => {}
            }
        }
        if open {
            v.push("unclosed VS".into());
        }
    }
    if seq.attention_mask.iter().any(|m| !m) || seq.token_ids.contains(&PAD) {
        v.push("unwindowed sequence contains padding".into());
    }
    // one run of equal segments per visit, alternating from segment 1
    let mut runs = Vec::new();
    for &s in &seq.visit_segment {
        if runs.last() != Some(&s) {
            runs.push(s);
        }
    }
    if runs.len() != n_visits || runs.first() != Some(&1) || runs.iter().any(|&s| s != 1 && s != 2) {
        v.push(format!("segment runs {runs:?} for {n_visits} visits"));
    }
    for w in 1..n {
        if seq.time_years[w] < seq.time_years[w - 1] || seq.age_years[w] < seq.age_years[w - 1] {
            v.push(format!("time or age decreases at {w}"));
            break;
        }
    }
    for (i, (&t, &ty)) in seq.token_ids.iter().zip(&seq.visit_type_ids).enumerate() {
        let separator = is_att(t) || t == SEP;
        if separator != (ty == TYPE_NONE) {
            v.push(format!("position {i}: token {t} has visit type {ty}"));
            break;
        }
    }
    v
}

/// Invariants of a fixed-size window cut from `full`.
pub fn window_violations(full: &TokenSequence, w: &TokenSequence, context: usize) -> Vec<String> {
    let mut v = Vec::new();
    if w.len() != context {
        v.push(format!("window length {}, want {context}", w.len()));
    }
    let real = full.len().min(context);
    if w.n_real() != real || w.attention_mask[..real].iter().any(|m| !m) {
        v.push(format!("window has {} real tokens, want {real} leading", w.n_real()));
    }
    for i in real..w.len() {
        if w.token_ids[i] != PAD || w.visit_segment[i] != 0 || w.visit_type_ids[i] != TYPE_NONE {
            v.push(format!("padding position {i} carries data"));
            break;
        }
    }
    let found = (0..=full.len() - real).any(|s| full.token_ids[s..s + real] == w.token_ids[..real]);
    if !found {
        v.push("window is not a contiguous slice".into());
    }
    v
}

/// Checks every patient of `store` under every variant; returns the
/// violations found and the number of sequences checked.
pub fn store_violations(store: &EventStore, seed: u64) -> (Vec<String>, usize) {
    let vocab = Vocabulary::from_store(store).unwrap();
    let types = VisitTypes::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut checked = 0;
    for p in store.patients() {
        let n_visits = p.visits.iter().filter(|v| !v.events.is_empty()).count();
        let n_events = p.n_events();
        for variant in Variant::ALL {
            let seq = build_sequence(store, &p.person.person_id, variant, &vocab, &types).unwrap();
            checked += 1;
            for msg in sequence_violations(&seq, variant, n_visits, n_events) {
                out.push(format!("{} {}: {msg}", p.person.person_id, variant.name()));
            }
            for mode in [WindowMode::PretrainRandomSlice, WindowMode::FinetunePreTruncate] {
                let w = seq.window(CONTEXT_WINDOW, mode, &mut rng);
                for msg in window_violations(&seq, &w, CONTEXT_WINDOW) {
                    out.push(format!("{} {} {mode:?}: {msg}", p.person.person_id, variant.name()));
                }
                if mode == WindowMode::FinetunePreTruncate && seq.len() > CONTEXT_WINDOW {
                    let tail = &seq.token_ids[seq.len() - CONTEXT_WINDOW..];
                    if w.token_ids != tail {
                        out.push(format!("{}: fine-tune window is not the most recent tokens", p.person.person_id));
                    }
                }
            }
        }
    }
    (out, checked)
}

#[derive(Clone, Debug, Default)]
pub struct MaskStats {
    pub maskable: usize,
    pub selected: usize,
    pub to_mask: usize,
    pub to_random: usize,
    pub unchanged: usize,
    pub typed: usize,
    pub vtp_selected: usize,
    pub pad_selected: usize,
    pub untyped_selected: usize,
    pub special_selected: usize,
}

impl MaskStats {
    pub fn mlm_rate(&self) -> f64 {
        self.selected as f64 / self.maskable as f64
    }

    pub fn fractions(&self) -> [f64; 3] {
        let s = self.selected as f64;
        [self.to_mask as f64 / s, self.to_random as f64 / s, self.unchanged as f64 / s]
    }

    pub fn vtp_rate(&self) -> f64 {
        self.vtp_selected as f64 / self.typed as f64
    }
}

/// Masks windowed synthetic sequences until at least `min_positions`
/// maskable positions were seen. Random replacements that happen to equal
/// the original count as unchanged, so the vocabulary is kept large.
pub fn masking_stats(min_positions: usize, specials: bool, seed: u64) -> MaskStats {
    let store = generate_synthetic(
        &SynthConfig {
            n_patients: 400,
            n_conditions: 1500,
            ..Default::default()
        },
        seed,
    )
    .unwrap();
    let vocab = Vocabulary::from_store(&store).unwrap();
    let types = VisitTypes::default();
    let cfg = MlmConfig {
        mask_special_tokens: specials,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut st = MaskStats::default();
    'outer: loop {
        for p in store.patients() {
            let seq = build_sequence(&store, &p.person.person_id, Variant::Cehr, &vocab, &types).unwrap();
            let w = seq.window(64, WindowMode::PretrainRandomSlice, &mut rng);
            let Ok(m) = apply_mlm_mask(&w, &cfg, vocab.len(), &mut rng) else { continue };
            for i in 0..w.len() {
                let t = w.token_ids[i];
                let real = w.attention_mask[i] && t != PAD;
                let concept = t >= FIRST_CONCEPT || t == UNK;
                if real && (specials || concept) {
                    st.maskable += 1;
                }
                if m.weights[i] > 0.0 {
                    st.selected += 1;
                    if !real {
                        st.pad_selected += 1;
                    }
                    if !specials && !concept {
                        st.special_selected += 1;
                    }
                    match m.input_ids[i] {
                        MASK => st.to_mask += 1,
                        x if x == t => st.unchanged += 1,
                        _ => st.to_random += 1,
                    }
                }
            }
            let vtp = apply_vtp_mask(&w.visit_type_ids, 0.5, &mut rng).unwrap();
            for i in 0..w.len() {
                let typed = w.visit_type_ids[i] > TYPE_MASK;
                st.typed += typed as usize;
                if vtp.weights[i] > 0.0 {
                    st.vtp_selected += 1;
                    if !typed {
                        st.untyped_selected += 1;
                    }
                    if vtp.masked_ids[i] != TYPE_MASK {
                        st.untyped_selected += 1;
                    }
                }
            }
            if st.maskable >= min_positions && st.typed >= min_positions {
                break 'outer;
            }
        }
    }
    st
}

pub struct Check {
    pub name: String,
    pub err: f64,
    pub tol: f64,
}

impl Check {
    pub fn ok(&self) -> bool {
        self.err <= self.tol
    }
}

fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    init::normal(shape, 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn weighted_sum(t: &mut Tape, y: Var) -> Result<Var> {
    let r = rand_t(t.shape(y), 999);
    let r = t.constant(r);
    let p = t.mul(y, r)?;
    t.sum(p)
}

fn op(out: &mut Vec<Check>, name: &str, inputs: &[Tensor], tol: f64, f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) {
    let r = check_inputs(inputs, CheckOptions::default(), |t, v| {
        let y = f(t, v)?;
        if t.value(y).numel() == 1 {
            Ok(y)
        } else {
            weighted_sum(t, y)
        }
    })
    .unwrap();
    out.push(Check {
        name: name.into(),
        err: r.max_rel_err,
        tol,
    });
}

/// Finite-difference checks of every differentiable tape operation.
pub fn op_checks() -> Vec<Check> {
    let mut c = Vec::new();
    let a = rand_t(&[2, 3], 20);
    let b = rand_t(&[2, 3], 21);
    let x = rand_t(&[3, 4], 30);
    op(&mut c, "matmul", &[rand_t(&[2, 4], 1), rand_t(&[4, 3], 2)], LINEAR_TOL, |t, v| t.matmul(v[0], v[1]));
    op(&mut c, "linear", &[rand_t(&[2, 3, 4], 3), rand_t(&[4, 5], 4), rand_t(&[5], 5)], LINEAR_TOL, |t, v| {
        t.linear(v[0], v[1], v[2])
    });
    op(&mut c, "matmul_transposed", &[rand_t(&[2, 3, 4], 6), rand_t(&[5, 4], 7)], LINEAR_TOL, |t, v| {
        t.matmul_transposed(v[0], v[1])
    });
    op(&mut c, "bmm", &[rand_t(&[2, 3, 4], 8), rand_t(&[2, 4, 2], 9)], LINEAR_TOL, |t, v| t.bmm(v[0], v[1], false));
    op(&mut c, "bmm_t", &[rand_t(&[2, 3, 4], 10), rand_t(&[2, 5, 4], 11)], LINEAR_TOL, |t, v| t.bmm(v[0], v[1], true));
    op(&mut c, "add", &[a.clone(), b.clone()], LINEAR_TOL, |t, v| t.add(v[0], v[1]));
    op(&mut c, "sub", &[a.clone(), b.clone()], LINEAR_TOL, |t, v| t.sub(v[0], v[1]));
    op(&mut c, "mul", &[a.clone(), b.clone()], TOL, |t, v| t.mul(v[0], v[1]));
    op(&mut c, "scale", &[a.clone()], LINEAR_TOL, |t, v| t.scale(v[0], -2.5));
    op(&mut c, "add_bias", &[a.clone(), rand_t(&[3], 22)], LINEAR_TOL, |t, v| t.add_bias(v[0], v[1]));
    op(&mut c, "reshape", &[a.clone()], LINEAR_TOL, |t, v| t.reshape(v[0], &[3, 2]));
    op(&mut c, "permute", &[rand_t(&[2, 3, 4], 23)], LINEAR_TOL, |t, v| t.permute(v[0], &[2, 0, 1]));
    op(&mut c, "concat", &[a.clone(), rand_t(&[2, 2], 24)], LINEAR_TOL, |t, v| t.concat_last(&[v[0], v[1]]));
    op(&mut c, "slice", &[a.clone()], LINEAR_TOL, |t, v| t.slice_last(v[0], 1, 2));
    op(&mut c, "select_step", &[rand_t(&[2, 3, 2], 25)], LINEAR_TOL, |t, v| t.select_step(v[0], 1));
    op(&mut c, "stack", &[a.clone(), b.clone()], LINEAR_TOL, |t, v| t.stack_steps(&[v[0], v[1]]));
    op(&mut c, "where_rows", &[a.clone(), b.clone()], LINEAR_TOL, |t, v| t.where_rows(&[true, false], v[0], v[1]));
    op(&mut c, "mask_keys+softmax", &[rand_t(&[4, 2, 3], 26)], TOL, |t, v| {
        let m = t.mask_keys(v[0], &[true, false, true, true, true, false])?;
        t.softmax_rows(m)
    });
    op(&mut c, "sum", &[a.clone()], LINEAR_TOL, |t, v| t.sum(v[0]));
    op(&mut c, "mean", &[a.clone()], LINEAR_TOL, |t, v| t.mean(v[0]));
    op(&mut c, "embedding", &[rand_t(&[5, 3], 27)], LINEAR_TOL, |t, v| t.embedding(v[0], &[4, 0, 4, 2], &[2, 2]));
    op(&mut c, "gelu", &[x.clone()], TOL, |t, v| t.gelu(v[0]));
    op(&mut c, "tanh", &[x.clone()], TOL, |t, v| t.tanh(v[0]));
    op(&mut c, "sigmoid", &[x.clone()], TOL, |t, v| t.sigmoid(v[0]));
    op(&mut c, "softmax", &[x.clone()], TOL, |t, v| t.softmax_rows(v[0]));
    op(&mut c, "layer_norm", &[x.clone(), rand_t(&[4], 31), rand_t(&[4], 32)], 1e-5, |t, v| {
        t.layer_norm(v[0], v[1], v[2], 1e-12)
    });
    op(&mut c, "time2vec", &[rand_t(&[2, 3], 33), rand_t(&[4], 34), rand_t(&[4], 35)], 1e-5, |t, v| {
        t.time2vec(v[0], v[1], v[2])
    });
    op(&mut c, "dropout", &[x.clone()], LINEAR_TOL, |t, v| {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        t.dropout(v[0], 0.3, &mut rng, true)
    });
    op(&mut c, "cross_entropy", &[rand_t(&[2, 3, 5], 36)], TOL, |t, v| {
        t.masked_cross_entropy(v[0], &[0, 4, 2, 1, 3, 3], &[1.0, 0.0, 2.0, 0.5, 0.0, 1.0])
    });
    op(&mut c, "bce_with_logits", &[rand_t(&[6], 37)], TOL, |t, v| {
        t.bce_with_logits(v[0], &[0.0, 1.0, 1.0, 0.0, 1.0, 0.0], &[1.0; 6])
    });

    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let m = BiLstm::new(&mut store, "lstm", 3, 2, &mut rng).unwrap();
    let xid = store.insert("x", rand_t(&[2, 4, 3], 41)).unwrap();
    let r = check_params(&mut store, CheckOptions::default(), |t, p| {
        let y = m.forward(t, p, p.var(xid), &[4, 2])?;
        weighted_sum(t, y)
    })
    .unwrap();
    c.push(Check {
        name: "bilstm".into(),
        err: r.max_rel_err,
        tol: TOL,
    });
    c
}

/// The smallest model used for whole-network gradient checks.
pub fn tiny_config(mode: EmbeddingMode) -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        n_heads: 2,
        d_model: 16,
        d_ff: 32,
        k: 4,
        context_window: 8,
        vocab_size: FIRST_CONCEPT as usize + 8,
        embedding_mode: mode,
        lstm_hidden: 4,
        seed: 5,
        ..Default::default()
    }
}

/// Two rows of length 8 and 6 with two visits each.
pub fn tiny_batch() -> Batch {
    let row = |n: usize, t0: f64| {
        let mut s = TokenSequence::default();
        let toks = [VS, FIRST_CONCEPT, FIRST_CONCEPT + 3, VE, M1 + 1, VS, FIRST_CONCEPT + 5, VE];
        for (i, &tok) in toks.iter().enumerate().take(n) {
            let second = i >= 4;
            let time = t0 + if second { 0.2 } else { 0.0 };
            s.token_ids.push(tok);
            s.time_years.push(time);
            s.age_years.push(time - 1.0);
            s.visit_segment.push(if i == 4 || !second { 1 } else { 2 });
            s.visit_type_ids.push(if i == 4 { TYPE_NONE } else if second { 3 } else { 2 });
            s.attention_mask.push(true);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        s.window(8, WindowMode::FinetunePreTruncate, &mut rng)
    };
    let a = row(8, 40.1);
    let b = row(6, 43.7);
    Batch::new(&[&a, &b]).unwrap()
}

/// MLM positions with masked inputs, and VTP targets on typed positions.
pub fn tiny_targets(batch: &mut Batch) -> PretrainTargets {
    let mut t = PretrainTargets {
        masked_types: batch.visit_types.clone(),
        vtp_labels: batch.visit_types.clone(),
        vtp_weights: vec![0.0; batch.len()],
        ..Default::default()
    };
    for &pos in &[1usize, 2, 6, 9, 10, 12] {
        t.mlm_positions.push(pos);
        t.mlm_labels.push(batch.token_ids[pos]);
        batch.token_ids[pos] = MASK as usize;
    }
    for &pos in &[0usize, 2, 6, 8, 11] {
        t.masked_types[pos] = TYPE_MASK as usize;
        t.vtp_weights[pos] = 1.0;
    }
    t
}

fn model_check(name: &str, model: &CehrModel, f: impl Fn(&mut Tape, &cehr_tensor::Bound, &CehrModel) -> Result<Var>) -> Check {
    let mut store = model.params.clone();
    let r = check_params(&mut store, CheckOptions::default(), |t, p| f(t, p, model)).unwrap();
    Check {
        name: format!("{name} (worst {:?})", r.worst),
        err: r.max_rel_err,
        tol: TOL,
    }
}

fn core_err(e: cehr_core::Error) -> cehr_tensor::TensorError {
    match e {
        cehr_core::Error::Tensor(t) => t,
        other => panic!("{other}"),
    }
}

/// Whole-network checks: the pretraining loss (MLM plus VTP) under every
/// embedding mode, and the fine-tuning head.
pub fn model_checks() -> Vec<Check> {
    let mut out = Vec::new();
    let mut batch = tiny_batch();
    let targets = tiny_targets(&mut batch);
    for mode in [EmbeddingMode::ConcatFc, EmbeddingMode::Sum, EmbeddingMode::NonePositional] {
        let model = CehrModel::new(tiny_config(mode)).unwrap();
        out.push(model_check(&format!("pretrain loss, {}", mode.name()), &model, |t, p, m| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let parts = m.pretrain_loss(t, p, &batch, &targets, false, &mut rng).map_err(core_err)?;
            assert!(parts.vtp.is_some());
            Ok(parts.total)
        }));
    }
    let plain = tiny_batch();
    let model = CehrModel::new(tiny_config(EmbeddingMode::ConcatFc)).unwrap();
    out.push(model_check("fine-tune head", &model, |t, p, m| {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = m.classifier_logits(t, p, &plain, false, &mut rng).map_err(core_err)?;
        t.bce_with_logits(z, &[1.0, 0.0], &[1.0, 1.0])
    }));
    out
}

/// Uniform random draw helper for property tests.
pub fn pick<R: Rng>(rng: &mut R, n: usize) -> usize {
    rng.gen_range(0..n)
}

pub fn brute_auc(s: &[f64], y: &[u8]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..s.len() {
        for j in 0..s.len() {
            if y[i] == 1 && y[j] == 0 {
                den += 1.0;
                if s[i] > s[j] {
                    num += 1.0;
                } else if s[i] == s[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / den
}

/// Precision and recall at every distinct threshold `score >= t`, summed
/// as precision times recall gain in order of increasing recall.
pub fn brute_pr(s: &[f64], y: &[u8]) -> f64 {
    let mut th: Vec<f64> = s.to_vec();
    th.sort_by(|a, b| b.total_cmp(a));
    th.dedup();
    let pos = y.iter().filter(|&&v| v == 1).count() as f64;
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    for t in th {
        let tp = s.iter().zip(y).filter(|(v, l)| **v >= t && **l == 1).count() as f64;
        let fp = s.iter().zip(y).filter(|(v, l)| **v >= t && **l == 0).count() as f64;
        let recall = tp / pos;
        area += (recall - prev_recall) * tp / (tp + fp);
        prev_recall = recall;
    }
    area
}

pub fn instance(seed: u64) -> (Vec<f64>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(2..=200);
    // coarse scores force ties
    let levels = rng.gen_range(2..50);
    let mut y: Vec<u8> = (0..n).map(|_| rng.gen_bool(0.3) as u8).collect();
    y[0] = 1;
    y[1] = 0;
    let s = (0..n).map(|_| rng.gen_range(0..levels) as f64 / levels as f64).collect();
    (s, y)
}

/// Cyclic Jacobi rotations for a symmetric matrix: eigenvalues and
/// column eigenvectors.
pub fn jacobi(mut a: Vec<f64>, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|(i, j)| i != j).map(|(i, j)| a[i * n + j].powi(2)).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p * n + q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * a[p * n + q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i * n + i]).collect(), v)
}

pub fn pca_oracle(rows: &[Vec<f64>]) -> Vec<[f64; 2]> {
    let (n, d) = (rows.len(), rows[0].len());
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let mut c = vec![0.0; d * d];
    for r in rows {
        for a in 0..d {
            for b in 0..d {
                c[a * d + b] += (r[a] - mean[a]) * (r[b] - mean[b]) / (n - 1) as f64;
            }
        }
    }
    let (vals, vecs) = jacobi(c, d);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| vals[j].total_cmp(&vals[i]));
    rows.iter()
        .map(|r| {
            let mut p = [0.0; 2];
            for (k, &col) in order.iter().take(2).enumerate() {
                p[k] = (0..d).map(|a| (r[a] - mean[a]) * vecs[a * d + col]).sum();
            }
            p
        })
        .collect()
}

pub fn matches_up_to_sign(a: &[[f64; 2]], b: &[[f64; 2]], tol: f64) -> bool {
    (0..2).all(|k| {
        let same = a.iter().zip(b).all(|(x, y)| (x[k] - y[k]).abs() <= tol);
        let flip = a.iter().zip(b).all(|(x, y)| (x[k] + y[k]).abs() <= tol);
        same || flip
    })
}

/// Largest gap between the library metrics and the brute-force oracles
/// over `n` random tied instances.
pub fn metric_worst(n: u64) -> f64 {
    (0..n)
        .map(|seed| {
            let (s, y) = instance(seed);
            let a = (roc_auc(&s, &y).unwrap() - brute_auc(&s, &y)).abs();
            let p = (pr_auc(&s, &y).unwrap() - brute_pr(&s, &y)).abs();
            a.max(p)
        })
        .fold(0.0, f64::max)
}

/// Random matrices whose projection disagrees with the Jacobi oracle.
pub fn pca_mismatches(n: usize, tol: f64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    (0..n)
        .filter(|_| {
            let rows_n = rng.gen_range(3..20);
            let d = rng.gen_range(2..8);
            let rows: Vec<Vec<f64>> = (0..rows_n).map(|_| (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect();
            let t = Tensor::from_rows(&rows.iter().map(Vec::as_slice).collect::<Vec<_>>());
            !matches_up_to_sign(&pca_2d(&t).unwrap(), &pca_oracle(&rows), tol)
        })
        .count()
}

/// Differences between the cohort builder and the hand-traced
/// `expected.csv` of a fixture directory.
pub fn fixture_mismatches(dir: &Path) -> Vec<String> {
    let store = EventStore::load_dir(dir, &LoadOptions::default()).unwrap();
    let text = std::fs::read_to_string(dir.join("expected.csv")).unwrap();
    let mut want: Vec<(String, String, String, String, u8)> = Vec::new();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        want.push((f[0].into(), f[1].into(), f[2].into(), f[3].into(), f[4].parse().unwrap()));
    }
    let mut runs: Vec<(String, String)> = want.iter().map(|w| (w.0.clone(), w.1.clone())).collect();
    runs.dedup();
    let mut bad = Vec::new();
    for (name, obs) in runs {
        let def = shipped(&name).unwrap();
        let def = match obs.as_str() {
            "default" => def,
            days => def.with_observation_window(Some(days.parse().unwrap())),
        };
        let got: Vec<(String, String, u8)> = build_cohort(&store, &def)
            .unwrap()
            .into_iter()
            .map(|e| (e.person_id, e.index_date.format(DATE_FMT).to_string(), e.label))
            .collect();
        let expect: Vec<(String, String, u8)> = want
            .iter()
            .filter(|w| w.0 == name && w.1 == obs)
            .map(|w| (w.2.clone(), w.3.clone(), w.4))
            .collect();
        if got != expect {
            bad.push(format!("{name} observation={obs}: got {got:?}, want {expect:?}"));
        }
    }
    bad
}
