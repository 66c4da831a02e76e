//! The CEHR-BERT network, pretraining and supervised fine-tuning.

mod batch;
mod config;
mod network;
mod pretrain;
mod train;

pub use batch::{length_batches, Batch};
pub use config::{EmbeddingMode, ModelConfig};
pub use network::{sinusoidal, CehrModel, LossParts, PretrainTargets};
pub use pretrain::{epoch_means, loss_trace_csv, pretrain, pretraining_sequences, LossRow, PretrainConfig};
pub use train::{fit, mean_loss, predict, EarlyStopping, FitConfig, FitReport, Labeled, SequenceClassifier};
