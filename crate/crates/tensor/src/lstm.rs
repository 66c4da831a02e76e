//! Bidirectional LSTM over length-masked batches.
//!
//! Gate layout along the `4h` axis is input, forget, cell, output.

use rand::Rng;

use crate::error::{invalid, Result};
use crate::init;
use crate::params::{Bound, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// One direction: `w_ih[d x 4h]`, `w_hh[h x 4h]`, `b[4h]`.
#[derive(Clone, Copy, Debug)]
pub struct LstmDir {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct BiLstm {
    pub fwd: LstmDir,
    pub bwd: LstmDir,
    pub input: usize,
    pub hidden: usize,
}

impl LstmDir {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, d: usize, h: usize, rng: &mut R) -> Result<Self> {
        let a = 1.0 / (h as f64).sqrt();
        Ok(Self {
            w_ih: store.insert(format!("{prefix}.w_ih"), init::uniform(&[d, 4 * h], -a, a, rng))?,
            w_hh: store.insert(format!("{prefix}.w_hh"), init::uniform(&[h, 4 * h], -a, a, rng))?,
            b: store.insert(format!("{prefix}.b"), Tensor::zeros([4 * h]))?,
        })
    }
}

impl BiLstm {
    /// Registers `{prefix}.fwd.*` and `{prefix}.bwd.*`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            fwd: LstmDir::new(store, &format!("{prefix}.fwd"), input, hidden, rng)?,
            bwd: LstmDir::new(store, &format!("{prefix}.bwd"), input, hidden, rng)?,
            input,
            hidden,
        })
    }

    /// `x[B x L x d]` to `[B x 2h]`: the forward state after step
    /// `lengths[b] - 1` joined with the backward state after step 0.
    /// Positions at or beyond `lengths[b]` never touch the state.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, lengths: &[usize]) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.input || shape[0] != lengths.len() {
            return Err(invalid("bilstm", format!("input {shape:?} with {} lengths", lengths.len())));
        }
        let l = shape[1];
        if let Some(&bad) = lengths.iter().find(|&&n| n == 0 || n > l) {
            return Err(invalid("bilstm", format!("length {bad} outside [1, {l}]")));
        }
        let f = self.run(tape, p, &self.fwd, x, lengths, (0..l).collect())?;
        let b = self.run(tape, p, &self.bwd, x, lengths, (0..l).rev().collect())?;
        tape.concat_last(&[f, b])
    }

    fn run(
        &self,
        tape: &mut Tape,
        p: &Bound,
        dir: &LstmDir,
        x: Var,
        lengths: &[usize],
        order: Vec<usize>,
    ) -> Result<Var> {
        let (bsz, h) = (lengths.len(), self.hidden);
        let xw = tape.linear_nobias(x, p.var(dir.w_ih))?;
        let zero = Tensor::zeros([bsz, h]);
        let mut hs = tape.constant(zero.clone());
        let mut cs = tape.constant(zero);
        for t in order {
            let active: Vec<bool> = lengths.iter().map(|&n| t < n).collect();
            if !active.iter().any(|&a| a) {
                continue;
            }
            let xt = tape.select_step(xw, t)?;
            let hw = tape.matmul(hs, p.var(dir.w_hh))?;
            let z = tape.add(xt, hw)?;
            let z = tape.add_bias(z, p.var(dir.b))?;
            let i = tape.slice_last(z, 0, h)?;
            let i = tape.sigmoid(i)?;
            let f = tape.slice_last(z, h, h)?;
            let f = tape.sigmoid(f)?;
            let g = tape.slice_last(z, 2 * h, h)?;
            let g = tape.tanh(g)?;
            let o = tape.slice_last(z, 3 * h, h)?;
            let o = tape.sigmoid(o)?;
            let fc = tape.mul(f, cs)?;
            let ig = tape.mul(i, g)?;
            let c_new = tape.add(fc, ig)?;
            let tc = tape.tanh(c_new)?;
            let h_new = tape.mul(o, tc)?;
            cs = tape.where_rows(&active, c_new, cs)?;
            hs = tape.where_rows(&active, h_new, hs)?;
        }
        Ok(hs)
    }
}
