//! Supervised training shared by the fine-tuned encoder and the Bi-LSTM
//! baseline: Adam, early stopping on validation loss, best-weight restore.

use cehr_tensor::{Adam, AdamConfig, Bound, ParamStore, Tape, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::batch::{length_batches, Batch};
use super::network::CehrModel;
use crate::error::{Error, Result};
use crate::sequence::TokenSequence;

/// A model mapping a batch to one logit per row.
pub trait SequenceClassifier {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn logits(&self, tape: &mut Tape, p: &Bound, batch: &Batch, training: bool, rng: &mut ChaCha8Rng)
        -> Result<Var>;
}

impl SequenceClassifier for CehrModel {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn logits(&self, tape: &mut Tape, p: &Bound, batch: &Batch, training: bool, rng: &mut ChaCha8Rng) -> Result<Var> {
        self.classifier_logits(tape, p, batch, training, rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_epochs: 10,
            patience: 1,
            batch_size: 32,
            lr: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    pub train_losses: Vec<f64>,
    pub val_losses: Vec<f64>,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: usize,
    /// 1-based epoch after which training ended.
    pub stop_epoch: usize,
    pub stopped_early: bool,
}

/// Patience counter over validation losses.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    bad: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            bad: 0,
        }
    }

    /// Returns `(improved, stop)`.
    pub fn update(&mut self, loss: f64) -> (bool, bool) {
        if loss < self.best {
            self.best = loss;
            self.bad = 0;
            (true, false)
        } else {
            self.bad += 1;
            (false, self.bad >= self.patience)
        }
    }
}

/// Windowed sequence with a binary label.
pub type Labeled = (TokenSequence, f64);

fn batch_of(data: &[Labeled], idx: &[usize]) -> Result<(Batch, Vec<f64>)> {
    let rows: Vec<&TokenSequence> = idx.iter().map(|&i| &data[i].0).collect();
    Ok((Batch::new(&rows)?, idx.iter().map(|&i| data[i].1).collect()))
}

/// Mean binary cross-entropy with dropout off.
pub fn mean_loss<M: SequenceClassifier>(model: &M, data: &[Labeled], batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("no examples to score".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.sort_by_key(|&i| data[i].0.n_real());
    let mut total = 0.0;
    for chunk in idx.chunks(batch_size.max(1)) {
        let (batch, y) = batch_of(data, chunk)?;
        let mut tape = Tape::new();
        let p = model.params().bind(&mut tape);
        let z = model.logits(&mut tape, &p, &batch, false, &mut rng)?;
        let loss = tape.bce_with_logits(z, &y, &vec![1.0; y.len()])?;
        total += tape.value(loss).item() * y.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Probabilities for each sequence, dropout off.
pub fn predict<M: SequenceClassifier>(model: &M, seqs: &[TokenSequence], batch_size: usize) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out = vec![0.0; seqs.len()];
    let mut idx: Vec<usize> = (0..seqs.len()).collect();
    idx.sort_by_key(|&i| seqs[i].n_real());
    for chunk in idx.chunks(batch_size.max(1)) {
        let rows: Vec<&TokenSequence> = chunk.iter().map(|&i| &seqs[i]).collect();
        let batch = Batch::new(&rows)?;
        let mut tape = Tape::new();
        let p = model.params().bind(&mut tape);
        let z = model.logits(&mut tape, &p, &batch, false, &mut rng)?;
        for (&i, &v) in chunk.iter().zip(tape.value(z).data()) {
            out[i] = sigmoid(v);
        }
    }
    Ok(out)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Trains on `train`, stops when `val` loss fails to improve for
/// `patience` epochs and restores the best weights.
pub fn fit<M: SequenceClassifier>(model: &mut M, train: &[Labeled], val: &[Labeled], cfg: &FitConfig) -> Result<FitReport> {
    if train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    if val.is_empty() {
        return Err(Error::Data("empty validation set".into()));
    }
    if cfg.max_epochs == 0 || cfg.batch_size == 0 || cfg.patience == 0 {
        return Err(Error::Config("max_epochs, batch_size and patience must be >= 1".into()));
    }
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order_rng.set_stream(4);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    drop_rng.set_stream(5);
    let mut adam = Adam::new(AdamConfig::default());
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = model.params().snapshot();
    let mut report = FitReport {
        train_losses: Vec::new(),
        val_losses: Vec::new(),
        best_epoch: 0,
        stop_epoch: 0,
        stopped_early: false,
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    let lengths: Vec<usize> = train.iter().map(|(s, _)| s.n_real()).collect();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut order_rng);
        let mut sum = 0.0;
        for chunk in length_batches(&order, &lengths, cfg.batch_size, &mut order_rng) {
            let (batch, y) = batch_of(train, &chunk)?;
            let mut tape = Tape::new();
            let p = model.params().bind(&mut tape);
            let z = model.logits(&mut tape, &p, &batch, true, &mut drop_rng)?;
            let loss = tape.bce_with_logits(z, &y, &vec![1.0; y.len()])?;
            sum += tape.value(loss).item() * y.len() as f64;
            let grads = tape.backward(loss)?;
            let params = model.params_mut();
            params.zero_grad();
            params.accumulate(&p, &grads);
            adam.step(params, cfg.lr)?;
        }
        report.train_losses.push(sum / train.len() as f64);
        let v = mean_loss(model, val, cfg.batch_size)?;
        report.val_losses.push(v);
        report.stop_epoch = epoch;
        let (improved, stop) = stopper.update(v);
        if improved {
            best = model.params().snapshot();
            report.best_epoch = epoch;
        }
        if stop {
            report.stopped_early = epoch < cfg.max_epochs;
            break;
        }
    }
    model.params_mut().restore(&best);
    Ok(report)
}
