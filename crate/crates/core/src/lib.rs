//! Temporal patient-sequence pretraining: event data, tokenization, the
//! CEHR-BERT model, cohort construction, baselines and evaluation.

pub mod baselines;
pub mod cohort;
pub mod error;
pub mod event_store;
pub mod harness;
pub mod model;
pub mod sequence;
pub mod synth;

pub use error::{Error, Result};
