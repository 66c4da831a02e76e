use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use cehr_tensor::{cosine_lr, weights, Adam, AdamConfig, LrSchedule, Tape};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::batch::{length_batches, Batch};
use super::network::{CehrModel, PretrainTargets};
use crate::error::{io_err, Error, Result};
use crate::event_store::EventStore;
use crate::sequence::{
    apply_mlm_mask, apply_vtp_mask, build_sequence, MlmConfig, TokenSequence, Variant, VisitTypes, Vocabulary,
    WindowMode,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub eta_min: f64,
    pub mlm_rate: f64,
    pub mask_special_tokens: bool,
    pub vtp_rate: f64,
    /// Patients need more than this many events to be used.
    pub min_events: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 32,
            lr: 2e-4,
            eta_min: 0.0,
            mlm_rate: 0.15,
            mask_special_tokens: true,
            vtp_rate: 0.5,
            min_events: 5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossRow {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub mlm_loss: f64,
    pub vtp_loss: Option<f64>,
}

pub fn loss_trace_csv(rows: &[LossRow]) -> String {
    let mut s = String::from("step,epoch,lr,mlm_loss,vtp_loss\n");
    for r in rows {
        let vtp = r.vtp_loss.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{},{},{}", r.step, r.epoch, r.lr, r.mlm_loss, vtp);
    }
    s
}

/// Unwindowed sequences of every eligible patient, in person-id order.
pub fn pretraining_sequences(
    store: &EventStore,
    variant: Variant,
    vocab: &Vocabulary,
    types: &VisitTypes,
    min_events: usize,
) -> Result<Vec<TokenSequence>> {
    let seqs = store
        .eligible(min_events)
        .map(|p| build_sequence(store, &p.person.person_id, variant, vocab, types))
        .collect::<Result<Vec<_>>>()?;
    if seqs.is_empty() {
        return Err(Error::Data("no patient passes the pretraining filter".into()));
    }
    Ok(seqs)
}

fn masked_batch(
    seqs: &[&TokenSequence],
    model: &CehrModel,
    cfg: &PretrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Batch, PretrainTargets)> {
    let mlm = MlmConfig {
        rate: cfg.mlm_rate,
        mask_special_tokens: cfg.mask_special_tokens,
        ..Default::default()
    };
    let mut windows = Vec::with_capacity(seqs.len());
    let mut picks = Vec::with_capacity(seqs.len());
    for s in seqs {
        let mut w = s.window(model.config.context_window, WindowMode::PretrainRandomSlice, rng);
        let m = match apply_mlm_mask(&w, &mlm, model.config.vocab_size, rng) {
            Ok(m) => Some(m),
            Err(Error::NothingMaskable(_)) => None,
            Err(e) => return Err(e),
        };
        let v = match apply_vtp_mask(&w.visit_type_ids, cfg.vtp_rate, rng) {
            Ok(v) => Some(v),
            Err(Error::NothingMaskable(_)) => None,
            Err(e) => return Err(e),
        };
        if let Some(m) = &m {
            w.token_ids.clone_from(&m.input_ids);
        }
        windows.push(w);
        picks.push((m, v));
    }
    let refs: Vec<&TokenSequence> = windows.iter().collect();
    let batch = Batch::new(&refs)?;
    let l = batch.l;
    let mut t = PretrainTargets {
        masked_types: batch.visit_types.clone(),
        vtp_labels: batch.visit_types.clone(),
        vtp_weights: vec![0.0; batch.len()],
        ..Default::default()
    };
    for (r, (m, v)) in picks.iter().enumerate() {
        if let Some(m) = m {
            for i in 0..l {
                if m.weights[i] > 0.0 {
                    t.mlm_positions.push(r * l + i);
                    t.mlm_labels.push(m.labels[i] as usize);
                }
            }
        }
        if let Some(v) = v {
            for i in 0..l {
                t.masked_types[r * l + i] = v.masked_ids[i] as usize;
                t.vtp_weights[r * l + i] = v.weights[i];
            }
        }
    }
    Ok((batch, t))
}

/// Trains the MLM (+VTP) objective with Adam and a per-epoch cosine schedule.
/// Writes `epoch_{n}.cehrw` checkpoints into `checkpoint_dir` when given.
pub fn pretrain(
    model: &mut CehrModel,
    seqs: &[TokenSequence],
    cfg: &PretrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<Vec<LossRow>> {
    if seqs.is_empty() {
        return Err(Error::Data("no pretraining sequences".into()));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("epochs and batch_size must be >= 1".into()));
    }
    let sched = LrSchedule {
        initial_lr: cfg.lr,
        eta_min: cfg.eta_min,
        period_epochs: cfg.epochs,
    };
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    data_rng.set_stream(2);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    drop_rng.set_stream(3);
    let mut adam = Adam::new(AdamConfig::default());
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let lengths: Vec<usize> = seqs.iter().map(|s| s.len().min(model.config.context_window)).collect();
    let mut trace = Vec::new();
    if let Some(dir) = checkpoint_dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(&sched, epoch as f64)?;
        order.shuffle(&mut data_rng);
        for chunk in length_batches(&order, &lengths, cfg.batch_size, &mut data_rng) {
            let rows: Vec<&TokenSequence> = chunk.iter().map(|&i| &seqs[i]).collect();
            let (batch, targets) = masked_batch(&rows, model, cfg, &mut data_rng)?;
            if targets.mlm_positions.is_empty() {
                continue;
            }
            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape);
            let parts = model.pretrain_loss(&mut tape, &bound, &batch, &targets, true, &mut drop_rng)?;
            let grads = tape.backward(parts.total)?;
            model.params.zero_grad();
            model.params.accumulate(&bound, &grads);
            adam.step(&mut model.params, lr)?;
            trace.push(LossRow {
                step: trace.len(),
                epoch,
                lr,
                mlm_loss: parts.mlm,
                vtp_loss: parts.vtp,
            });
        }
        if let Some(dir) = checkpoint_dir {
            weights::save(&model.params, &dir.join(format!("epoch_{}.cehrw", epoch + 1)))?;
        }
    }
    Ok(trace)
}

/// Mean MLM loss per epoch.
pub fn epoch_means(trace: &[LossRow]) -> Vec<f64> {
    let n = trace.iter().map(|r| r.epoch + 1).max().unwrap_or(0);
    let mut sums = vec![(0.0, 0usize); n];
    for r in trace {
        sums[r.epoch].0 += r.mlm_loss;
        sums[r.epoch].1 += 1;
    }
    sums.into_iter().map(|(s, c)| s / c.max(1) as f64).collect()
}
