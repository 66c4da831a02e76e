use std::f64::consts::PI;

use cehr_tensor::{init, BiLstm, Bound, ParamId, ParamStore, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::batch::Batch;
use super::config::{EmbeddingMode, ModelConfig};
use crate::error::{Error, Result};

const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    g: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct T2v {
    omega: ParamId,
    phi: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Clone, Copy, Debug)]
struct Block {
    attn: Attention,
    ln1: Norm,
    ff1: Linear,
    ff2: Linear,
    ln2: Norm,
}

#[derive(Clone, Copy, Debug)]
enum Fusion {
    ConcatFc { time: T2v, age: T2v, fc: Linear },
    Sum { time: T2v, age: T2v, time_proj: Linear, age_proj: Linear },
    Positional,
}

#[derive(Clone, Copy, Debug)]
struct Vtp {
    types: ParamId,
    time: T2v,
    age: T2v,
    fc: Linear,
    ln: Norm,
    self_attn: Option<(Attention, Norm)>,
    cross: Attention,
    ln_cross: Norm,
    ff1: Linear,
    ff2: Linear,
    ln_ff: Norm,
    out: Linear,
}

#[derive(Clone, Copy, Debug)]
struct Head {
    lstm: BiLstm,
    dense: Linear,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    fn add(&mut self, name: String, t: Tensor) -> Result<ParamId> {
        Ok(self.store.insert(name, t)?)
    }

    fn weight(&mut self, name: String, shape: &[usize]) -> Result<ParamId> {
        let t = init::trunc_normal(shape, INIT_STD, &mut self.rng);
        self.add(name, t)
    }

    fn linear(&mut self, name: &str, d_in: usize, d_out: usize) -> Result<Linear> {
        Ok(Linear {
            w: self.weight(format!("{name}.w"), &[d_in, d_out])?,
            b: self.add(format!("{name}.b"), Tensor::zeros([d_out]))?,
        })
    }

    fn norm(&mut self, name: &str, d: usize) -> Result<Norm> {
        Ok(Norm {
            g: self.add(format!("{name}.g"), Tensor::full([d], 1.0))?,
            b: self.add(format!("{name}.b"), Tensor::zeros([d]))?,
        })
    }

    fn t2v(&mut self, name: &str, k: usize) -> Result<T2v> {
        let omega = init::normal(&[k], 0.0, 1.0, &mut self.rng);
        let phi = init::uniform(&[k], -PI, PI, &mut self.rng);
        Ok(T2v {
            omega: self.add(format!("{name}.omega"), omega)?,
            phi: self.add(format!("{name}.phi"), phi)?,
        })
    }

    fn attention(&mut self, name: &str, d: usize) -> Result<Attention> {
        Ok(Attention {
            q: self.linear(&format!("{name}.q"), d, d)?,
            k: self.linear(&format!("{name}.k"), d, d)?,
            v: self.linear(&format!("{name}.v"), d, d)?,
            o: self.linear(&format!("{name}.o"), d, d)?,
        })
    }
}

/// The CEHR-BERT network with its pretraining heads and fine-tuning head.
pub struct CehrModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    concept: ParamId,
    segment: ParamId,
    fusion: Fusion,
    emb_ln: Norm,
    blocks: Vec<Block>,
    mlm_dense: Linear,
    mlm_ln: Norm,
    mlm_bias: ParamId,
    vtp: Option<Vtp>,
    head: Head,
}

/// Targets for one pretraining batch; the batch itself already carries the
/// MLM-masked input ids.
#[derive(Clone, Debug, Default)]
pub struct PretrainTargets {
    /// Flat `b * l + i` positions selected for MLM.
    pub mlm_positions: Vec<usize>,
    pub mlm_labels: Vec<usize>,
    /// Visit-type ids after VTP masking, `[B x L]`.
    pub masked_types: Vec<usize>,
    pub vtp_labels: Vec<usize>,
    pub vtp_weights: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub total: Var,
    pub mlm: f64,
    /// Absent when VTP is disabled or nothing was masked.
    pub vtp: Option<f64>,
}

impl CehrModel {
    /// Parameters are initialized from `config.seed` alone.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let d = c.d_model;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        rng.set_stream(1);
        let mut b = Builder { store: &mut store, rng };

        let concept = b.weight("emb.concept".into(), &[c.vocab_size, d])?;
        let segment = b.weight("emb.segment".into(), &[3, d])?;
        let fusion = match c.embedding_mode {
            EmbeddingMode::ConcatFc => Fusion::ConcatFc {
                time: b.t2v("emb.time", c.k)?,
                age: b.t2v("emb.age", c.k)?,
                fc: b.linear("emb.fc", d + 2 * c.k, d)?,
            },
            EmbeddingMode::Sum => Fusion::Sum {
                time: b.t2v("emb.time", c.k)?,
                age: b.t2v("emb.age", c.k)?,
                time_proj: b.linear("emb.time_proj", c.k, d)?,
                age_proj: b.linear("emb.age_proj", c.k, d)?,
            },
            EmbeddingMode::NonePositional => Fusion::Positional,
        };
        let emb_ln = b.norm("emb.ln", d)?;
        let mut blocks = Vec::with_capacity(c.n_layers);
        for i in 0..c.n_layers {
            blocks.push(Block {
                attn: b.attention(&format!("enc.{i}.attn"), d)?,
                ln1: b.norm(&format!("enc.{i}.ln1"), d)?,
                ff1: b.linear(&format!("enc.{i}.ff1"), d, c.d_ff)?,
                ff2: b.linear(&format!("enc.{i}.ff2"), c.d_ff, d)?,
                ln2: b.norm(&format!("enc.{i}.ln2"), d)?,
            });
        }
        let mlm_dense = b.linear("mlm.dense", d, d)?;
        let mlm_ln = b.norm("mlm.ln", d)?;
        let mlm_bias = b.add("mlm.bias".into(), Tensor::zeros([c.vocab_size]))?;
        let vtp = if c.vtp_enabled {
            Some(Vtp {
                types: b.weight("vtp.types".into(), &[c.n_visit_types, d])?,
                time: b.t2v("vtp.time", c.k)?,
                age: b.t2v("vtp.age", c.k)?,
                fc: b.linear("vtp.fc", d + 2 * c.k, d)?,
                ln: b.norm("vtp.ln", d)?,
                self_attn: if c.vtp_self_attention {
                    Some((b.attention("vtp.self", d)?, b.norm("vtp.ln_self", d)?))
                } else {
                    None
                },
                cross: b.attention("vtp.cross", d)?,
                ln_cross: b.norm("vtp.ln_cross", d)?,
                ff1: b.linear("vtp.ff1", d, c.d_ff)?,
                ff2: b.linear("vtp.ff2", c.d_ff, d)?,
                ln_ff: b.norm("vtp.ln_ff", d)?,
                out: b.linear("vtp.out", d, c.n_visit_types)?,
            })
        } else {
            None
        };
        let lstm = BiLstm::new(b.store, "cls.lstm", d, c.lstm_hidden, &mut b.rng)?;
        let dense = b.linear("cls.dense", 2 * c.lstm_hidden, 1)?;
        Ok(Self {
            config,
            params: store,
            concept,
            segment,
            fusion,
            emb_ln,
            blocks,
            mlm_dense,
            mlm_ln,
            mlm_bias,
            vtp,
            head: Head { lstm, dense },
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    fn lin(&self, tape: &mut Tape, p: &Bound, x: Var, l: Linear) -> Result<Var> {
        Ok(tape.linear(x, p.var(l.w), p.var(l.b))?)
    }

    fn norm(&self, tape: &mut Tape, p: &Bound, x: Var, n: Norm) -> Result<Var> {
        Ok(tape.layer_norm(x, p.var(n.g), p.var(n.b), self.config.layer_norm_eps)?)
    }

    fn t2v(&self, tape: &mut Tape, p: &Bound, values: &[f64], shape: [usize; 2], t: T2v) -> Result<Var> {
        let tau = tape.constant(Tensor::new(shape, values.to_vec())?);
        Ok(tape.time2vec(tau, p.var(t.omega), p.var(t.phi))?)
    }

    /// Temporal concept embedding `[B x L x d]`, before normalization.
    pub fn embed_raw(&self, tape: &mut Tape, p: &Bound, batch: &Batch) -> Result<Var> {
        let shape = [batch.b, batch.l];
        let c = tape.embedding(p.var(self.concept), &batch.token_ids, &shape)?;
        let s = tape.embedding(p.var(self.segment), &batch.segments, &shape)?;
        let x = tape.add(c, s)?;
        match self.fusion {
            Fusion::ConcatFc { time, age, fc } => {
                let tt = self.t2v(tape, p, &batch.time_years, shape, time)?;
                let ta = self.t2v(tape, p, &batch.age_years, shape, age)?;
                let cat = tape.concat_last(&[x, tt, ta])?;
                self.lin(tape, p, cat, fc)
            }
            Fusion::Sum {
                time,
                age,
                time_proj,
                age_proj,
            } => {
                let tt = self.t2v(tape, p, &batch.time_years, shape, time)?;
                let ta = self.t2v(tape, p, &batch.age_years, shape, age)?;
                let pt = self.lin(tape, p, tt, time_proj)?;
                let pa = self.lin(tape, p, ta, age_proj)?;
                let x = tape.add(x, pt)?;
                Ok(tape.add(x, pa)?)
            }
            Fusion::Positional => {
                let pe = tape.constant(sinusoidal(batch.b, batch.l, self.config.d_model));
                Ok(tape.add(x, pe)?)
            }
        }
    }

    /// Embedding followed by layer norm and dropout.
    pub fn embed(&self, tape: &mut Tape, p: &Bound, batch: &Batch, training: bool, rng: &mut ChaCha8Rng) -> Result<Var> {
        let e = self.embed_raw(tape, p, batch)?;
        let e = self.norm(tape, p, e, self.emb_ln)?;
        Ok(tape.dropout(e, self.config.dropout, rng, training)?)
    }

    /// Multi-head attention of `xq[B x Lq x d]` over `xkv[B x Lk x d]`;
    /// returns the output and the attention weights `[B*H x Lq x Lk]`.
    fn attend(
        &self,
        tape: &mut Tape,
        p: &Bound,
        a: &Attention,
        xq: Var,
        xkv: Var,
        key_valid: &[bool],
    ) -> Result<(Var, Var)> {
        let (b, lq) = (tape.shape(xq)[0], tape.shape(xq)[1]);
        let lk = tape.shape(xkv)[1];
        let (h, dh, d) = (self.config.n_heads, self.config.head_dim(), self.config.d_model);
        let split = |tape: &mut Tape, x: Var, len: usize| -> Result<Var> {
            let x = tape.reshape(x, &[b, len, h, dh])?;
            let x = tape.permute(x, &[0, 2, 1, 3])?;
            Ok(tape.reshape(x, &[b * h, len, dh])?)
        };
        let q = self.lin(tape, p, xq, a.q)?;
        let k = self.lin(tape, p, xkv, a.k)?;
        let v = self.lin(tape, p, xkv, a.v)?;
        let (q, k, v) = (split(tape, q, lq)?, split(tape, k, lk)?, split(tape, v, lk)?);
        let scores = tape.bmm(q, k, true)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let scores = tape.mask_keys(scores, key_valid)?;
        let probs = tape.softmax_rows(scores)?;
        let ctx = tape.bmm(probs, v, false)?;
        let ctx = tape.reshape(ctx, &[b, h, lq, dh])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b, lq, d])?;
        Ok((self.lin(tape, p, ctx, a.o)?, probs))
    }

    fn residual_norm(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        y: Var,
        n: Norm,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let y = tape.dropout(y, self.config.dropout, rng, training)?;
        let s = tape.add(x, y)?;
        self.norm(tape, p, s, n)
    }

    fn ffn(&self, tape: &mut Tape, p: &Bound, x: Var, ff1: Linear, ff2: Linear) -> Result<Var> {
        let h = self.lin(tape, p, x, ff1)?;
        let h = tape.gelu(h)?;
        self.lin(tape, p, h, ff2)
    }

    /// Post-norm encoder stack. Also returns every layer's attention weights.
    pub fn encode_from(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        valid: &[bool],
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, Vec<Var>)> {
        let mut x = x;
        let mut maps = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let (a, probs) = self.attend(tape, p, &blk.attn, x, x, valid)?;
            maps.push(probs);
            x = self.residual_norm(tape, p, x, a, blk.ln1, training, rng)?;
            let f = self.ffn(tape, p, x, blk.ff1, blk.ff2)?;
            x = self.residual_norm(tape, p, x, f, blk.ln2, training, rng)?;
        }
        Ok((x, maps))
    }

    pub fn encode(&self, tape: &mut Tape, p: &Bound, batch: &Batch, training: bool, rng: &mut ChaCha8Rng) -> Result<Var> {
        let e = self.embed(tape, p, batch, training, rng)?;
        Ok(self.encode_from(tape, p, e, &batch.valid, training, rng)?.0)
    }

    /// MLM logits `[S x V]` at the flat positions `sel` of `enc[B x L x d]`.
    pub fn mlm_logits(&self, tape: &mut Tape, p: &Bound, enc: Var, sel: &[usize]) -> Result<Var> {
        let s = tape.shape(enc).to_vec();
        let d = self.config.d_model;
        let flat = tape.reshape(enc, &[s[0] * s[1], d])?;
        let g = tape.embedding(flat, sel, &[sel.len()])?;
        let h = self.lin(tape, p, g, self.mlm_dense)?;
        let h = tape.gelu(h)?;
        let h = self.norm(tape, p, h, self.mlm_ln)?;
        let logits = tape.matmul_transposed(h, p.var(self.concept))?;
        Ok(tape.add_bias(logits, p.var(self.mlm_bias))?)
    }

    /// Visit-type logits `[B x L x n_types]` from masked type ids and the
    /// encoder output.
    pub fn vtp_logits(
        &self,
        tape: &mut Tape,
        p: &Bound,
        enc: Var,
        batch: &Batch,
        masked_types: &[usize],
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let v = self
            .vtp
            .as_ref()
            .ok_or_else(|| Error::Config("visit-type prediction is disabled".into()))?;
        let shape = [batch.b, batch.l];
        let q = tape.embedding(p.var(v.types), masked_types, &shape)?;
        let tt = self.t2v(tape, p, &batch.time_years, shape, v.time)?;
        let ta = self.t2v(tape, p, &batch.age_years, shape, v.age)?;
        let cat = tape.concat_last(&[q, tt, ta])?;
        let q = self.lin(tape, p, cat, v.fc)?;
        let q = self.norm(tape, p, q, v.ln)?;
        let mut q = tape.dropout(q, self.config.dropout, rng, training)?;
        if let Some((attn, ln)) = &v.self_attn {
            let (a, _) = self.attend(tape, p, attn, q, q, &batch.valid)?;
            q = self.residual_norm(tape, p, q, a, *ln, training, rng)?;
        }
        let (c, _) = self.attend(tape, p, &v.cross, q, enc, &batch.valid)?;
        q = self.residual_norm(tape, p, q, c, v.ln_cross, training, rng)?;
        let f = self.ffn(tape, p, q, v.ff1, v.ff2)?;
        q = self.residual_norm(tape, p, q, f, v.ln_ff, training, rng)?;
        self.lin(tape, p, q, v.out)
    }

    /// `L_mlm + lambda * L_vtp`.
    pub fn pretrain_loss(
        &self,
        tape: &mut Tape,
        p: &Bound,
        batch: &Batch,
        targets: &PretrainTargets,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<LossParts> {
        if targets.mlm_positions.is_empty() {
            return Err(Error::NothingMaskable("no MLM position in batch"));
        }
        let enc = self.encode(tape, p, batch, training, rng)?;
        let logits = self.mlm_logits(tape, p, enc, &targets.mlm_positions)?;
        let ones = vec![1.0; targets.mlm_positions.len()];
        let mlm = tape.masked_cross_entropy(logits, &targets.mlm_labels, &ones)?;
        let mlm_value = tape.value(mlm).item();
        let has_vtp = self.vtp.is_some() && targets.vtp_weights.iter().any(|&w| w > 0.0);
        if !has_vtp {
            return Ok(LossParts {
                total: mlm,
                mlm: mlm_value,
                vtp: None,
            });
        }
        let vl = self.vtp_logits(tape, p, enc, batch, &targets.masked_types, training, rng)?;
        let vtp = tape.masked_cross_entropy(vl, &targets.vtp_labels, &targets.vtp_weights)?;
        let vtp_value = tape.value(vtp).item();
        let weighted = tape.scale(vtp, self.config.vtp_loss_weight)?;
        Ok(LossParts {
            total: tape.add(mlm, weighted)?,
            mlm: mlm_value,
            vtp: Some(vtp_value),
        })
    }

    /// Fine-tuning logits `[B]`: encoder, Bi-LSTM over real lengths, dense.
    pub fn classifier_logits(
        &self,
        tape: &mut Tape,
        p: &Bound,
        batch: &Batch,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let enc = self.encode(tape, p, batch, training, rng)?;
        let h = self.head.lstm.forward(tape, p, enc, &batch.lengths)?;
        let h = tape.dropout(h, self.config.dropout, rng, training)?;
        let z = self.lin(tape, p, h, self.head.dense)?;
        Ok(tape.reshape(z, &[batch.b])?)
    }

    /// Rows of the concept table for the given token ids.
    pub fn token_embeddings(&self, ids: &[u32]) -> Result<Tensor> {
        let table = self.params.get(self.concept);
        let d = self.config.d_model;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let i = id as usize;
            if i >= self.config.vocab_size {
                return Err(Error::Data(format!("token id {id} outside the vocabulary")));
            }
            out.extend_from_slice(&table.data()[i * d..(i + 1) * d]);
        }
        Ok(Tensor::new([ids.len(), d], out)?)
    }
}

/// Fixed sinusoidal position table tiled over the batch, `[B x L x d]`.
pub fn sinusoidal(b: usize, l: usize, d: usize) -> Tensor {
    let mut row = vec![0.0; l * d];
    for pos in 0..l {
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let a = pos as f64 / rate;
            row[pos * d + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    let data = row.iter().copied().cycle().take(b * l * d).collect();
    Tensor::new([b, l, d], data).expect("consistent shape")
}
