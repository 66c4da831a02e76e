use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingMode {
    /// `FC(concat(concept + segment, t2v(time), t2v(age)))`.
    ConcatFc,
    /// `concept + segment + P_t t2v(time) + P_a t2v(age)`.
    Sum,
    /// `concept + segment + sinusoidal(position)`; no temporal channels.
    NonePositional,
}

impl EmbeddingMode {
    pub fn name(self) -> &'static str {
        match self {
            EmbeddingMode::ConcatFc => "concat_fc",
            EmbeddingMode::Sum => "sum",
            EmbeddingMode::NonePositional => "none_positional",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub dropout: f64,
    /// time2vec width, used for both time and age.
    pub k: usize,
    pub context_window: usize,
    pub vocab_size: usize,
    pub n_visit_types: usize,
    pub embedding_mode: EmbeddingMode,
    pub vtp_enabled: bool,
    pub vtp_loss_weight: f64,
    pub vtp_self_attention: bool,
    /// Bi-LSTM hidden size per direction in the fine-tuning head.
    pub lstm_hidden: usize,
    pub layer_norm_eps: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 5,
            n_heads: 8,
            d_model: 128,
            d_ff: 512,
            dropout: 0.1,
            k: 16,
            context_window: 300,
            vocab_size: 0,
            n_visit_types: 9,
            embedding_mode: EmbeddingMode::ConcatFc,
            vtp_enabled: true,
            vtp_loss_weight: 1.0,
            vtp_self_attention: true,
            lstm_hidden: 64,
            layer_norm_eps: 1e-12,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.n_layers == 0 {
            v.push("n_layers must be >= 1".to_string());
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            v.push(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.d_ff == 0 {
            v.push("d_ff must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            v.push(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.k == 0 {
            v.push("k must be >= 1".into());
        }
        if self.context_window == 0 {
            v.push("context_window must be >= 1".into());
        }
        if self.vocab_size <= crate::sequence::FIRST_CONCEPT as usize {
            v.push(format!("vocab_size {} leaves no concept tokens", self.vocab_size));
        }
        if self.n_visit_types < 3 {
            v.push(format!("n_visit_types {} must cover the two reserved ids and one type", self.n_visit_types));
        }
        if !(self.vtp_loss_weight >= 0.0) {
            v.push(format!("vtp_loss_weight {} must be >= 0", self.vtp_loss_weight));
        }
        if self.lstm_hidden == 0 {
            v.push("lstm_hidden must be >= 1".into());
        }
        if !(self.layer_norm_eps > 0.0) {
            v.push("layer_norm_eps must be > 0".into());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.join("; ")))
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}
