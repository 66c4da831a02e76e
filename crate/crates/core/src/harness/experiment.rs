use std::sync::Arc;

use cehr_tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::folds::{few_shot_plan, FoldPlan, Split};
use super::metrics::{pr_auc, roc_auc};
use crate::baselines::{
    train_bilstm_classifier, train_logistic, BiLstmConfig, EmbeddingInit, LogisticConfig, SparseRow,
};
use crate::cohort::{rollup_features, FeatureVocab, Hierarchy, LabeledExample};
use crate::error::{Error, Result};
use crate::event_store::EventStore;
use crate::model::{fit, predict, CehrModel, FitConfig, Labeled, ModelConfig};
use crate::sequence::{build_visits, TokenSequence, Variant, VisitTypes, Vocabulary, WindowMode, CONTEXT_WINDOW};

/// Read-only inputs shared by every run.
#[derive(Clone, Copy)]
pub struct ExperimentData<'a> {
    pub store: &'a EventStore,
    pub vocab: &'a Vocabulary,
    pub types: &'a VisitTypes,
}

#[derive(Clone, Debug)]
pub struct Task {
    pub name: String,
    pub examples: Vec<LabeledExample>,
}

impl Task {
    pub fn labels(&self) -> Vec<u8> {
        self.examples.iter().map(|e| e.label).collect()
    }
}

#[derive(Clone, Debug)]
pub enum ModelSpec {
    /// Encoder fine-tuning, from pretrained weights when given.
    Cehr {
        name: String,
        variant: Variant,
        config: ModelConfig,
        pretrained: Option<Arc<Vec<Tensor>>>,
        fit: FitConfig,
    },
    Logistic {
        config: LogisticConfig,
        hierarchy: Arc<Hierarchy>,
    },
    BiLstm {
        config: BiLstmConfig,
        init: EmbeddingInit,
        fit: FitConfig,
    },
    /// Scores every example the same; a harness sanity check.
    Constant(f64),
}

impl ModelSpec {
    pub fn name(&self) -> &str {
        match self {
            Self::Cehr { name, .. } => name,
            Self::Logistic { .. } => "LR",
            Self::BiLstm { .. } => "Bi-LSTM",
            Self::Constant(_) => "constant",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FoldResult {
    pub fold: usize,
    pub n_train: usize,
    pub auc: f64,
    pub pr_auc: f64,
    /// Epoch bookkeeping for models trained with early stopping.
    pub best_epoch: Option<usize>,
    pub stop_epoch: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub task: String,
    pub model: String,
    pub fraction: f64,
    pub folds: Vec<FoldResult>,
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// `80.7±0.6%`.
pub fn format_pct(mean: f64, std: f64) -> String {
    format!("{:.1}±{:.1}%", 100.0 * mean, 100.0 * std)
}

impl MetricReport {
    pub fn auc(&self) -> (f64, f64) {
        mean_std(&self.folds.iter().map(|f| f.auc).collect::<Vec<_>>())
    }

    pub fn pr_auc(&self) -> (f64, f64) {
        mean_std(&self.folds.iter().map(|f| f.pr_auc).collect::<Vec<_>>())
    }

    pub fn auc_cell(&self) -> String {
        let (m, s) = self.auc();
        format_pct(m, s)
    }

    pub fn pr_auc_cell(&self) -> String {
        let (m, s) = self.pr_auc();
        format_pct(m, s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOptions {
    /// Seed for few-shot sampling and training order.
    pub seed: u64,
    pub independent_few_shot: bool,
    pub jobs: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            independent_few_shot: false,
            jobs: 1,
        }
    }
}

/// Fine-tuning inputs: the most recent `context` tokens of each feature
/// window, post-padded.
pub fn task_sequences(data: ExperimentData, task: &Task, variant: Variant, context: usize) -> Result<Vec<TokenSequence>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    task.examples
        .iter()
        .map(|ex| {
            let p = data.store.patient(&ex.person_id)?;
            let seq = build_visits(&p.person, &ex.feature_visits(p), variant, data.vocab, data.types)?;
            Ok(seq.window(context, WindowMode::FinetunePreTruncate, &mut rng))
        })
        .collect()
}

enum Inputs {
    Sequences(Vec<TokenSequence>),
    None,
}

fn labeled(seqs: &[TokenSequence], labels: &[u8], idx: &[usize]) -> Vec<Labeled> {
    idx.iter().map(|&i| (seqs[i].clone(), labels[i] as f64)).collect()
}

fn pick<T: Clone>(xs: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| xs[i].clone()).collect()
}

struct FoldScores {
    scores: Vec<f64>,
    best_epoch: Option<usize>,
    stop_epoch: Option<usize>,
}

fn run_fold(
    data: ExperimentData,
    task: &Task,
    spec: &ModelSpec,
    inputs: &Inputs,
    labels: &[u8],
    train: &[usize],
    split: &Split,
    seed: u64,
) -> Result<FoldScores> {
    match (spec, inputs) {
        (ModelSpec::Constant(c), _) => Ok(FoldScores {
            scores: vec![*c; split.test.len()],
            best_epoch: None,
            stop_epoch: None,
        }),
        (ModelSpec::Cehr { config, pretrained, fit: fc, .. }, Inputs::Sequences(seqs)) => {
            let mut model = CehrModel::new(config.clone())?;
            if let Some(w) = pretrained {
                if w.len() != model.params.len() {
                    return Err(Error::Data("pretrained weights do not match the model config".into()));
                }
                model.params.restore(w);
            }
            let cfg = FitConfig { seed, ..fc.clone() };
            let report = fit(&mut model, &labeled(seqs, labels, train), &labeled(seqs, labels, &split.val), &cfg)?;
            Ok(FoldScores {
                scores: predict(&model, &pick(seqs, &split.test), cfg.batch_size)?,
                best_epoch: Some(report.best_epoch),
                stop_epoch: Some(report.stop_epoch),
            })
        }
        (ModelSpec::BiLstm { config, init, fit: fc }, Inputs::Sequences(seqs)) => {
            let cfg = FitConfig { seed, ..fc.clone() };
            let lcfg = BiLstmConfig { seed, ..config.clone() };
            let (model, report) = train_bilstm_classifier(
                &labeled(seqs, labels, train),
                &labeled(seqs, labels, &split.val),
                data.vocab,
                init,
                &lcfg,
                &cfg,
            )?;
            Ok(FoldScores {
                scores: predict(&model, &pick(seqs, &split.test), cfg.batch_size)?,
                best_epoch: Some(report.best_epoch),
                stop_epoch: Some(report.stop_epoch),
            })
        }
        (ModelSpec::Logistic { config, hierarchy }, _) => {
            let patients = |idx: &[usize]| -> Result<Vec<_>> {
                idx.iter()
                    .map(|&i| {
                        let ex = &task.examples[i];
                        Ok((ex, data.store.patient(&ex.person_id)?))
                    })
                    .collect()
            };
            let tr = patients(train)?;
            let vocab = FeatureVocab::fit(tr.iter().copied(), hierarchy);
            let rows = |v: &[(&LabeledExample, &crate::event_store::Patient)]| -> Vec<SparseRow> {
                v.iter().map(|(ex, p)| rollup_features(ex, p, hierarchy, &vocab)).collect()
            };
            let ys: Vec<f64> = train.iter().map(|&i| labels[i] as f64).collect();
            let fitted = train_logistic(&rows(&tr), &ys, vocab.len(), config)?;
            Ok(FoldScores {
                scores: fitted.model.predict(&rows(&patients(&split.test)?)),
                best_epoch: None,
                stop_epoch: None,
            })
        }
        _ => unreachable!("inputs prepared per spec"),
    }
}

/// Trains and tests `spec` on every fold of `plan`, with the training split
/// cut to `fraction` when it is below 1.
pub fn run_experiment(
    data: ExperimentData,
    task: &Task,
    spec: &ModelSpec,
    plan: &FoldPlan,
    fraction: f64,
    opts: &RunOptions,
) -> Result<MetricReport> {
    let labels = task.labels();
    let inputs = match spec {
        ModelSpec::Cehr { variant, config, .. } => {
            Inputs::Sequences(task_sequences(data, task, *variant, config.context_window)?)
        }
        ModelSpec::BiLstm { .. } => Inputs::Sequences(task_sequences(data, task, Variant::MedbertStyle, CONTEXT_WINDOW)?),
        _ => Inputs::None,
    };
    let run = |(f, split): (usize, &Split)| -> Result<FoldResult> {
        let train = if fraction < 1.0 {
            let seed = opts.seed.wrapping_add(f as u64);
            few_shot_plan(&split.train, &labels, &[fraction], seed, opts.independent_few_shot)?.remove(0)
        } else {
            split.train.clone()
        };
        let out = run_fold(data, task, spec, &inputs, &labels, &train, split, opts.seed.wrapping_add(f as u64))?;
        let test_labels = pick(&labels, &split.test);
        Ok(FoldResult {
            fold: f,
            n_train: train.len(),
            auc: roc_auc(&out.scores, &test_labels)?,
            pr_auc: pr_auc(&out.scores, &test_labels)?,
            best_epoch: out.best_epoch,
            stop_epoch: out.stop_epoch,
        })
    };
    let folds: Vec<FoldResult> = if opts.jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.jobs)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;
        pool.install(|| plan.folds.par_iter().enumerate().map(run).collect::<Result<Vec<_>>>())?
    } else {
        plan.folds.iter().enumerate().map(run).collect::<Result<Vec<_>>>()?
    };
    Ok(MetricReport {
        task: task.name.clone(),
        model: spec.name().to_string(),
        fraction,
        folds,
    })
}
