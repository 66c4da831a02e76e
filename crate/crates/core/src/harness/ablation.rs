use std::sync::Arc;

use cehr_tensor::Tensor;

use super::experiment::{run_experiment, ExperimentData, MetricReport, ModelSpec, RunOptions, Task};
use super::folds::FoldPlan;
use crate::error::Result;
use crate::model::{pretrain, pretraining_sequences, CehrModel, EmbeddingMode, FitConfig, ModelConfig, PretrainConfig};
use crate::sequence::Variant;

/// Rows of the ablation grid, in report order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Ablation {
    MBert,
    BBert,
    NsBert,
    NtBert,
    AltBert,
    VBert,
    CehrBert,
    RBert,
}

impl Ablation {
    pub const ALL: [Ablation; 8] = [
        Self::MBert,
        Self::BBert,
        Self::NsBert,
        Self::NtBert,
        Self::AltBert,
        Self::VBert,
        Self::CehrBert,
        Self::RBert,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::MBert => "M-BERT",
            Self::BBert => "B-BERT",
            Self::NsBert => "NS-BERT",
            Self::NtBert => "NT-BERT",
            Self::AltBert => "ALT-BERT",
            Self::VBert => "V-BERT",
            Self::CehrBert => "CEHR-BERT",
            Self::RBert => "R-BERT",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name().eq_ignore_ascii_case(s))
    }

    /// `(representation, embedding mode, visit type prediction, pretrained)`.
    pub fn spec(self) -> (Variant, EmbeddingMode, bool, bool) {
        use EmbeddingMode::*;
        match self {
            Self::MBert => (Variant::MedbertStyle, ConcatFc, true, true),
            Self::BBert => (Variant::BehrtStyle, ConcatFc, true, true),
            Self::NsBert => (Variant::Cehr, ConcatFc, false, true),
            Self::NtBert => (Variant::Cehr, NonePositional, true, true),
            Self::AltBert => (Variant::Cehr, Sum, true, true),
            Self::VBert => (Variant::NoVsVe, ConcatFc, true, true),
            Self::CehrBert => (Variant::Cehr, ConcatFc, true, true),
            Self::RBert => (Variant::Cehr, ConcatFc, true, false),
        }
    }

    pub fn model_config(self, base: &ModelConfig) -> ModelConfig {
        let (_, mode, vtp, _) = self.spec();
        ModelConfig {
            embedding_mode: mode,
            vtp_enabled: vtp,
            ..base.clone()
        }
    }
}

/// Pretrains the encoder for one grid row on every eligible patient.
/// Returns `None` for the unpretrained control.
pub fn pretrain_variant(
    data: ExperimentData,
    row: Ablation,
    base: &ModelConfig,
    cfg: &PretrainConfig,
) -> Result<Option<Arc<Vec<Tensor>>>> {
    let (variant, _, _, pretrained) = row.spec();
    if !pretrained {
        return Ok(None);
    }
    let mut model = CehrModel::new(row.model_config(base))?;
    let seqs = pretraining_sequences(data.store, variant, data.vocab, data.types, cfg.min_events)?;
    pretrain(&mut model, &seqs, cfg, None)?;
    Ok(Some(Arc::new(model.params.snapshot())))
}

pub fn cehr_spec(row: Ablation, base: &ModelConfig, weights: Option<Arc<Vec<Tensor>>>, fit: &FitConfig) -> ModelSpec {
    ModelSpec::Cehr {
        name: row.name().to_string(),
        variant: row.spec().0,
        config: row.model_config(base),
        pretrained: weights,
        fit: fit.clone(),
    }
}

#[derive(Clone, Debug)]
pub struct AblationBudget {
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub fit: FitConfig,
    pub fraction: f64,
}

/// One report per (row, task), rows in [`Ablation::ALL`] order.
pub fn ablation_matrix(
    data: ExperimentData,
    tasks: &[(Task, FoldPlan)],
    rows: &[Ablation],
    budget: &AblationBudget,
    opts: &RunOptions,
) -> Result<Vec<MetricReport>> {
    let mut out = Vec::new();
    for &row in Ablation::ALL.iter().filter(|r| rows.contains(r)) {
        let weights = pretrain_variant(data, row, &budget.model, &budget.pretrain)?;
        let spec = cehr_spec(row, &budget.model, weights, &budget.fit);
        for (task, plan) in tasks {
            out.push(run_experiment(data, task, &spec, plan, budget.fraction, opts)?);
        }
    }
    Ok(out)
}
