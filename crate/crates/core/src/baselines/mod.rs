//! Comparison models: logistic regression on rolled-up counts and a Bi-LSTM
//! over concept sequences.

mod bilstm;
mod logistic;

pub use bilstm::{read_embedding_file, train_bilstm_classifier, BiLstmClassifier, BiLstmConfig, EmbeddingInit};
pub use logistic::{train_logistic, LinearModel, LogisticConfig, LogisticFit, SparseRow};
