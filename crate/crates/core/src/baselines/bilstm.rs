use std::fs;
use std::path::{Path, PathBuf};

use cehr_tensor::{init, BiLstm, Bound, ParamId, ParamStore, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::model::{fit, Batch, FitConfig, FitReport, Labeled, SequenceClassifier};
use crate::sequence::Vocabulary;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BiLstmConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for BiLstmConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            hidden: 64,
            dropout: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EmbeddingInit {
    Random,
    /// Headerless CSV, one `token,v1,...,vd` row per token. Tokens missing
    /// from the file keep their random rows.
    File(PathBuf),
}

/// Concept embedding, Bi-LSTM, dense logit.
pub struct BiLstmClassifier {
    pub config: BiLstmConfig,
    pub params: ParamStore,
    table: ParamId,
    lstm: BiLstm,
    dense_w: ParamId,
    dense_b: ParamId,
}

pub fn read_embedding_file(path: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let file = path.display().to_string();
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut f = line.split(',');
        let token = f.next().unwrap_or_default().trim().to_string();
        let v = f
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Malformed {
                file: file.clone(),
                line: i as u64 + 1,
                msg: e.to_string(),
            })?;
        if token.is_empty() || v.is_empty() {
            return Err(Error::Malformed {
                file: file.clone(),
                line: i as u64 + 1,
                msg: "expected token followed by values".into(),
            });
        }
        rows.push((token, v));
    }
    Ok(rows)
}

impl BiLstmClassifier {
    pub fn new(cfg: BiLstmConfig, vocab: &Vocabulary, init: &EmbeddingInit) -> Result<Self> {
        if cfg.embed_dim == 0 || cfg.hidden == 0 || !(0.0..1.0).contains(&cfg.dropout) {
            return Err(Error::Config("embed_dim and hidden must be >= 1, dropout in [0, 1)".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(6);
        let mut params = ParamStore::new();
        let mut table_t = init::normal(&[vocab.len(), cfg.embed_dim], 0.0, 0.1, &mut rng);
        if let EmbeddingInit::File(path) = init {
            let mut hits = 0;
            for (token, v) in read_embedding_file(path)? {
                if v.len() != cfg.embed_dim {
                    return Err(Error::Data(format!(
                        "{}: `{token}` has {} values, expected {}",
                        path.display(),
                        v.len(),
                        cfg.embed_dim
                    )));
                }
                if let Some(id) = vocab.get(&token) {
                    let d = cfg.embed_dim;
                    table_t.data_mut()[id as usize * d..(id as usize + 1) * d].copy_from_slice(&v);
                    hits += 1;
                }
            }
            if hits == 0 {
                return Err(Error::Data(format!("{}: no token matches the vocabulary", path.display())));
            }
        }
        let table = params.insert("bilstm.embedding", table_t)?;
        let lstm = BiLstm::new(&mut params, "bilstm.lstm", cfg.embed_dim, cfg.hidden, &mut rng)?;
        let dense_w = params.insert("bilstm.dense.w", init::trunc_normal(&[2 * cfg.hidden, 1], 0.02, &mut rng))?;
        let dense_b = params.insert("bilstm.dense.b", Tensor::zeros([1]))?;
        Ok(Self {
            config: cfg,
            params,
            table,
            lstm,
            dense_w,
            dense_b,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.params.get(self.table).shape()[0]
    }
}

impl SequenceClassifier for BiLstmClassifier {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn logits(&self, tape: &mut Tape, p: &Bound, batch: &Batch, training: bool, rng: &mut ChaCha8Rng) -> Result<Var> {
        if let Some(&bad) = batch.token_ids.iter().find(|&&t| t >= self.vocab_size()) {
            return Err(Error::Data(format!("token id {bad} outside the vocabulary")));
        }
        let x = tape.embedding(p.var(self.table), &batch.token_ids, &[batch.b, batch.l])?;
        let x = tape.dropout(x, self.config.dropout, rng, training)?;
        let h = self.lstm.forward(tape, p, x, &batch.lengths)?;
        let h = tape.dropout(h, self.config.dropout, rng, training)?;
        let z = tape.linear(h, p.var(self.dense_w), p.var(self.dense_b))?;
        Ok(tape.reshape(z, &[batch.b])?)
    }
}

/// Builds and fits the classifier on sequences of the MEDBERT-style layout.
pub fn train_bilstm_classifier(
    train: &[Labeled],
    val: &[Labeled],
    vocab: &Vocabulary,
    init: &EmbeddingInit,
    cfg: &BiLstmConfig,
    fit_cfg: &FitConfig,
) -> Result<(BiLstmClassifier, FitReport)> {
    if train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let mut model = BiLstmClassifier::new(cfg.clone(), vocab, init)?;
    let report = fit(&mut model, train, val, fit_cfg)?;
    Ok((model, report))
}
