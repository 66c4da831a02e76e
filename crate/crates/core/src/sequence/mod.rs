//! Token sequences for each representation variant, windowing and masking.

mod build;
mod masking;
mod vocab;

pub use build::{att_token, build_sequence, build_visits, Variant};
pub use masking::{apply_mlm_mask, apply_vtp_mask, MlmConfig, MlmMasked, VtpMasked};
pub use vocab::*;

use rand::Rng;
use serde::Serialize;

/// Aligned per-position channels for one patient.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TokenSequence {
    pub token_ids: Vec<u32>,
    pub time_years: Vec<f64>,
    pub age_years: Vec<f64>,
    /// 0 for padding, then 1 and 2 alternating across visits.
    pub visit_segment: Vec<u8>,
    pub visit_type_ids: Vec<u32>,
    pub attention_mask: Vec<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WindowMode {
    /// Uniformly random contiguous slice.
    PretrainRandomSlice,
    /// Most recent tokens.
    FinetunePreTruncate,
}

pub const CONTEXT_WINDOW: usize = 300;

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Number of non-pad positions.
    pub fn n_real(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m).count()
    }

    pub(crate) fn push(&mut self, token: u32, time: f64, age: f64, segment: u8, vtype: u32) {
        self.token_ids.push(token);
        self.time_years.push(time);
        self.age_years.push(age);
        self.visit_segment.push(segment);
        self.visit_type_ids.push(vtype);
        self.attention_mask.push(true);
    }

    fn slice(&self, start: usize, end: usize) -> Self {
        Self {
            token_ids: self.token_ids[start..end].to_vec(),
            time_years: self.time_years[start..end].to_vec(),
            age_years: self.age_years[start..end].to_vec(),
            visit_segment: self.visit_segment[start..end].to_vec(),
            visit_type_ids: self.visit_type_ids[start..end].to_vec(),
            attention_mask: self.attention_mask[start..end].to_vec(),
        }
    }

    fn pad_to(&mut self, len: usize) {
        while self.token_ids.len() < len {
            self.token_ids.push(PAD);
            self.time_years.push(0.0);
            self.age_years.push(0.0);
            self.visit_segment.push(0);
            self.visit_type_ids.push(TYPE_NONE);
            self.attention_mask.push(false);
        }
    }

    /// Cuts to at most `context` real tokens and post-pads to exactly `context`.
    pub fn window<R: Rng + ?Sized>(&self, context: usize, mode: WindowMode, rng: &mut R) -> Self {
        let n = self.n_real().min(self.len());
        let (start, end) = if n <= context {
            (0, n)
        } else {
            match mode {
                WindowMode::FinetunePreTruncate => (n - context, n),
                WindowMode::PretrainRandomSlice => {
                    let s = rng.gen_range(0..=n - context);
                    (s, s + context)
                }
            }
        };
        let mut out = self.slice(start, end);
        out.pad_to(context.max(1));
        out
    }

    /// JSON object with the six channels, for debugging exports.
    pub fn to_json(&self, person_id: &str) -> String {
        #[derive(Serialize)]
        struct Row<'a> {
            person_id: &'a str,
            #[serde(flatten)]
            seq: &'a TokenSequence,
        }
        serde_json::to_string(&Row { person_id, seq: self }).expect("serializable")
    }
}
