//! Operation tape and reverse-mode differentiation.
//!
//! Every op appends a node holding its output value and whatever it needs
//! for the backward pass. Nodes only reference earlier nodes, so a reverse
//! sweep over the node list is a valid topological order.

use rand::Rng;

use crate::error::{invalid, Result, TensorError};
use crate::kernels::{gemm, Mat};
use crate::tensor::Tensor;

/// Score written into masked attention positions; `exp` of it underflows to
/// exactly zero after max-subtraction.
pub const MASKED_SCORE: f64 = -1.0e30;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    BatchMatMul {
        a: usize,
        b: usize,
        g: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddBias {
        x: usize,
        bias: usize,
    },
    Gelu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    Dropout {
        x: usize,
        mask: Vec<f64>,
    },
    Reshape(usize),
    Permute {
        x: usize,
        perm: Vec<usize>,
    },
    Concat(Vec<usize>),
    SliceLast {
        x: usize,
        start: usize,
    },
    SelectStep {
        x: usize,
        t: usize,
    },
    Stack(Vec<usize>),
    WhereRows {
        a: usize,
        b: usize,
        mask: Vec<bool>,
    },
    MaskKeys {
        x: usize,
        valid: Vec<bool>,
    },
    Time2Vec {
        tau: usize,
        omega: usize,
        phi: usize,
    },
    Sum(usize),
    Mean(usize),
    CrossEntropy {
        logits: usize,
        rows: Vec<usize>,
        labels: Vec<usize>,
        scale: Vec<f64>,
        probs: Vec<f64>,
    },
    BceLogits {
        logits: usize,
        targets: Vec<f64>,
        scale: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a computation for later differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that required one.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn split_last(shape: &[usize]) -> (usize, usize) {
    let last = shape.last().copied().unwrap_or(1);
    let rows = if last == 0 {
        shape[..shape.len() - 1].iter().product()
    } else {
        shape.iter().product::<usize>() / last
    };
    (rows, last)
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Flat index map for a permutation: `out[i] = input[map[i]]`.
fn permute_map(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let numel: usize = shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    for _ in 0..numel {
        let off: usize = (0..rank).map(|i| idx[i] * in_strides[perm[i]]).sum();
        map.push(off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    map
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, i: usize) -> &[f64] {
        self.nodes[i].value.data()
    }

    fn needs(&self, inputs: &[usize]) -> bool {
        inputs.iter().any(|&i| self.nodes[i].needs_grad)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Adds a leaf that receives a gradient.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            value: t.detached(),
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf that is treated as a constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t.detached(),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// 2-D matrix product `a[m x k] * b[k x n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        self.matmul_impl(a, b, sa[0], sa[1], sb[1], false, vec![sa[0], sb[1]])
    }

    /// `x[... x k] * w[k x n]` over all leading axes.
    pub fn linear_nobias(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.is_empty() || sw.len() != 2 || sx[sx.len() - 1] != sw[0] {
            return Err(shape_err("linear", sx, sw));
        }
        let (m, k) = split_last(sx);
        let n = sw[1];
        let mut out_shape = sx[..sx.len() - 1].to_vec();
        out_shape.push(n);
        self.matmul_impl(x, w, m, k, n, false, out_shape)
    }

    /// `x[... x k] * w[k x n] + b[n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.linear_nobias(x, w)?;
        self.add_bias(y, b)
    }

    /// `x[... x k] * t[n x k]^T`, e.g. projection onto a tied embedding table.
    pub fn matmul_transposed(&mut self, x: Var, t: Var) -> Result<Var> {
        let (sx, st) = (self.shape(x), self.shape(t));
        if sx.is_empty() || st.len() != 2 || sx[sx.len() - 1] != st[1] {
            return Err(shape_err("matmul_transposed", sx, st));
        }
        let (m, k) = split_last(sx);
        let n = st[0];
        let mut out_shape = sx[..sx.len() - 1].to_vec();
        out_shape.push(n);
        self.matmul_impl(x, t, m, k, n, true, out_shape)
    }

    #[allow(clippy::too_many_arguments)]
    fn matmul_impl(
        &mut self,
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
        out_shape: Vec<usize>,
    ) -> Result<Var> {
        let mut out = vec![0.0; m * n];
        let bm = if trans_b {
            Mat::transposed(self.data(b.0), k)
        } else {
            Mat::rows(self.data(b.0), n)
        };
        gemm(m, k, n, Mat::rows(self.data(a.0), k), bm, &mut out, 0.0);
        let needs = self.needs(&[a.0, b.0]);
        self.push(
            "matmul",
            Tensor::new(out_shape, out)?,
            Op::MatMul {
                a: a.0,
                b: b.0,
                m,
                k,
                n,
                trans_b,
            },
            needs,
        )
    }

    /// Batched product over the leading axis: `a[g x m x k] * b[g x k x n]`,
    /// or `a * b^T` with `b[g x n x k]` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(shape_err("bmm", sa, sb));
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![0.0; g * m * n];
        let (da, db) = (self.data(a.0), self.data(b.0));
        for gi in 0..g {
            let ab = &da[gi * m * k..(gi + 1) * m * k];
            let bb = &db[gi * k * n..(gi + 1) * k * n];
            let bm = if trans_b {
                Mat::transposed(bb, k)
            } else {
                Mat::rows(bb, n)
            };
            gemm(m, k, n, Mat::rows(ab, k), bm, &mut out[gi * m * n..(gi + 1) * m * n], 0.0);
        }
        let needs = self.needs(&[a.0, b.0]);
        self.push(
            "bmm",
            Tensor::new(vec![g, m, n], out)?,
            Op::BatchMatMul {
                a: a.0,
                b: b.0,
                g,
                m,
                k,
                n,
                trans_b,
            },
            needs,
        )
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(name, sa, sb));
        }
        Ok(self.data(a.0).iter().zip(self.data(b.0)).map(|(&x, &y)| f(x, y)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        let shape = self.shape(a).to_vec();
        let needs = self.needs(&[a.0, b.0]);
        self.push("add", Tensor::new(shape, out)?, Op::Add(a.0, b.0), needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        let shape = self.shape(a).to_vec();
        let needs = self.needs(&[a.0, b.0]);
        self.push("sub", Tensor::new(shape, out)?, Op::Sub(a.0, b.0), needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        let shape = self.shape(a).to_vec();
        let needs = self.needs(&[a.0, b.0]);
        self.push("mul", Tensor::new(shape, out)?, Op::Mul(a.0, b.0), needs)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out: Vec<f64> = self.data(x.0).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(&[x.0]);
        self.push("scale", Tensor::new(shape, out)?, Op::Scale(x.0, c), needs)
    }

    /// Adds `bias[n]` to every slice along the last axis of `x[... x n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sb.len() != 1 || sx.last() != Some(&sb[0]) {
            return Err(shape_err("add_bias", sx, sb));
        }
        let n = sb[0];
        let b = self.data(bias.0);
        let out: Vec<f64> = self
            .data(x.0)
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % n])
            .collect();
        let shape = sx.to_vec();
        let needs = self.needs(&[x.0, bias.0]);
        self.push("add_bias", Tensor::new(shape, out)?, Op::AddBias { x: x.0, bias: bias.0 }, needs)
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let out: Vec<f64> = self.data(x.0).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(&[x.0]);
        self.push(name, Tensor::new(shape, out)?, op, needs)
    }

    /// GELU, tanh approximation:
    /// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary("gelu", x, gelu, Op::Gelu(x.0))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, f64::tanh, Op::Tanh(x.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x.0))
    }

    /// Softmax over the last axis, with max-subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (rows, n) = split_last(&shape);
        if n == 0 || shape.is_empty() {
            return Err(invalid("softmax_rows", "empty last axis"));
        }
        let mut out = self.data(x.0).to_vec();
        for r in 0..rows {
            softmax_in_place(&mut out[r * n..(r + 1) * n]);
        }
        let needs = self.needs(&[x.0]);
        self.push("softmax_rows", Tensor::new(shape, out)?, Op::Softmax(x.0), needs)
    }

    /// Layer normalization over the last axis with affine `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (rows, d) = split_last(&shape);
        if d == 0 || self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(shape_err("layer_norm", &shape, self.shape(gain)));
        }
        let xs = self.data(x.0);
        let (g, b) = (self.data(gain.0), self.data(bias.0));
        let mut out = vec![0.0; rows * d];
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let needs = self.needs(&[x.0, gain.0, bias.0]);
        self.push(
            "layer_norm",
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                rstd,
            },
            needs,
        )
    }

    /// Gathers rows of `table[V x d]`; the output has shape `id_shape ++ [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], id_shape: &[usize]) -> Result<Var> {
        let st = self.shape(table);
        if st.len() != 2 {
            return Err(shape_err("embedding", st, &[]));
        }
        if id_shape.iter().product::<usize>() != ids.len() {
            return Err(shape_err("embedding", id_shape, &[ids.len()]));
        }
        let (v, d) = (st[0], st[1]);
        let tab = self.data(table.0);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    size: v,
                });
            }
            out.extend_from_slice(&tab[id * d..(id + 1) * d]);
        }
        let mut shape = id_shape.to_vec();
        shape.push(d);
        let needs = self.needs(&[table.0]);
        self.push(
            "embedding",
            Tensor::new(shape, out)?,
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
            needs,
        )
    }

    /// Inverted dropout. Identity (the same handle) when not training or
    /// when `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(invalid("dropout", format!("rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out: Vec<f64> = self.data(x.0).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(&[x.0]);
        self.push("dropout", Tensor::new(shape, out)?, Op::Dropout { x: x.0, mask }, needs)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).detached().reshape(shape.to_vec())?;
        let needs = self.needs(&[x.0]);
        self.push("reshape", value, Op::Reshape(x.0), needs)
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err("permute", &shape, perm));
        }
        let map = permute_map(&shape, perm);
        let src = self.data(x.0);
        let out: Vec<f64> = map.iter().map(|&i| src[i]).collect();
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let needs = self.needs(&[x.0]);
        self.push(
            "permute",
            Tensor::new(out_shape, out)?,
            Op::Permute {
                x: x.0,
                perm: perm.to_vec(),
            },
            needs,
        )
    }

    /// Concatenation along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| invalid("concat_last", "no inputs"))?).to_vec();
        let lead = &first[..first.len().saturating_sub(1)];
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if s.is_empty() || &s[..s.len() - 1] != lead {
                return Err(shape_err("concat_last", &first, s));
            }
            widths.push(s[s.len() - 1]);
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&x, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.data(x.0)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let ids: Vec<usize> = xs.iter().map(|v| v.0).collect();
        let needs = self.needs(&ids);
        self.push("concat_last", Tensor::new(shape, out)?, Op::Concat(ids), needs)
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (rows, n) = split_last(&shape);
        if shape.is_empty() || start + len > n {
            return Err(invalid("slice_last", format!("{start}+{len} exceeds {n}")));
        }
        let src = self.data(x.0);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * n + start..r * n + start + len]);
        }
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = len;
        let needs = self.needs(&[x.0]);
        self.push("slice_last", Tensor::new(out_shape, out)?, Op::SliceLast { x: x.0, start }, needs)
    }

    /// `x[B x L x d] -> x[:, t, :]` of shape `[B x d]`.
    pub fn select_step(&mut self, x: Var, t: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || t >= shape[1] {
            return Err(invalid("select_step", format!("step {t} for shape {shape:?}")));
        }
        let (b, l, d) = (shape[0], shape[1], shape[2]);
        let src = self.data(x.0);
        let mut out = Vec::with_capacity(b * d);
        for bi in 0..b {
            out.extend_from_slice(&src[(bi * l + t) * d..(bi * l + t + 1) * d]);
        }
        let needs = self.needs(&[x.0]);
        self.push("select_step", Tensor::new(vec![b, d], out)?, Op::SelectStep { x: x.0, t }, needs)
    }

    /// Stacks `L` tensors of shape `[B x d]` into `[B x L x d]`.
    pub fn stack_steps(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| invalid("stack_steps", "no inputs"))?).to_vec();
        if first.len() != 2 || xs.iter().any(|&x| self.shape(x) != first.as_slice()) {
            return Err(shape_err("stack_steps", &first, &[]));
        }
        let (b, d, l) = (first[0], first[1], xs.len());
        let mut out = vec![0.0; b * l * d];
        for (t, &x) in xs.iter().enumerate() {
            let src = self.data(x.0);
            for bi in 0..b {
                out[(bi * l + t) * d..(bi * l + t + 1) * d].copy_from_slice(&src[bi * d..(bi + 1) * d]);
            }
        }
        let ids: Vec<usize> = xs.iter().map(|v| v.0).collect();
        let needs = self.needs(&ids);
        self.push("stack_steps", Tensor::new(vec![b, l, d], out)?, Op::Stack(ids), needs)
    }

    /// Row-wise select over the leading axis: row `r` comes from `a` when
    /// `mask[r]`, otherwise from `b`.
    pub fn where_rows(&mut self, mask: &[bool], a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b));
        if sa != sb || sa.is_empty() || sa[0] != mask.len() {
            return Err(shape_err("where_rows", &sa, sb));
        }
        let w = sa[1..].iter().product::<usize>();
        let (da, db) = (self.data(a.0), self.data(b.0));
        let mut out = Vec::with_capacity(da.len());
        for (r, &m) in mask.iter().enumerate() {
            let src = if m { da } else { db };
            out.extend_from_slice(&src[r * w..(r + 1) * w]);
        }
        let needs = self.needs(&[a.0, b.0]);
        self.push(
            "where_rows",
            Tensor::new(sa, out)?,
            Op::WhereRows {
                a: a.0,
                b: b.0,
                mask: mask.to_vec(),
            },
            needs,
        )
    }

    /// Replaces attention scores `x[G x Lq x Lk]` at invalid keys with
    /// [`MASKED_SCORE`]. `key_valid` is `[B x Lk]` with `G` a multiple of `B`;
    /// group `g` belongs to batch row `g / (G / B)`.
    pub fn mask_keys(&mut self, x: Var, key_valid: &[bool]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || shape[2] == 0 || key_valid.len() % shape[2] != 0 {
            return Err(invalid("mask_keys", format!("shape {shape:?}, mask len {}", key_valid.len())));
        }
        let (g, lq, lk) = (shape[0], shape[1], shape[2]);
        let b = key_valid.len() / lk;
        if b == 0 || g % b != 0 {
            return Err(invalid("mask_keys", format!("{g} groups for batch {b}")));
        }
        let per = g / b;
        let mut valid = Vec::with_capacity(g * lq * lk);
        for gi in 0..g {
            let row = &key_valid[(gi / per) * lk..(gi / per + 1) * lk];
            for _ in 0..lq {
                valid.extend_from_slice(row);
            }
        }
        let out: Vec<f64> = self
            .data(x.0)
            .iter()
            .zip(&valid)
            .map(|(&v, &ok)| if ok { v } else { MASKED_SCORE })
            .collect();
        let needs = self.needs(&[x.0]);
        self.push("mask_keys", Tensor::new(shape, out)?, Op::MaskKeys { x: x.0, valid }, needs)
    }

    /// Learnable periodic embedding of scalars: for each `tau`,
    /// `out[0] = w0 tau + p0` and `out[i] = sin(wi tau + pi)` for `i >= 1`.
    pub fn time2vec(&mut self, tau: Var, omega: Var, phi: Var) -> Result<Var> {
        let k = self.value(omega).numel();
        if k == 0 || self.shape(omega) != [k] || self.shape(phi) != [k] {
            return Err(shape_err("time2vec", self.shape(omega), self.shape(phi)));
        }
        let (t, w, p) = (self.data(tau.0), self.data(omega.0), self.data(phi.0));
        let mut out = Vec::with_capacity(t.len() * k);
        for &tv in t {
            out.push(w[0] * tv + p[0]);
            for i in 1..k {
                out.push((w[i] * tv + p[i]).sin());
            }
        }
        let mut shape = self.shape(tau).to_vec();
        shape.push(k);
        let needs = self.needs(&[tau.0, omega.0, phi.0]);
        self.push(
            "time2vec",
            Tensor::new(shape, out)?,
            Op::Time2Vec {
                tau: tau.0,
                omega: omega.0,
                phi: phi.0,
            },
            needs,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x.0).iter().sum();
        let needs = self.needs(&[x.0]);
        self.push("sum", Tensor::scalar(s), Op::Sum(x.0), needs)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(invalid("mean", "empty tensor"));
        }
        let s = self.data(x.0).iter().sum::<f64>() / n as f64;
        let needs = self.needs(&[x.0]);
        self.push("mean", Tensor::scalar(s), Op::Mean(x.0), needs)
    }

    /// Weighted mean cross-entropy over rows of `logits[... x C]`:
    /// `sum_i w_i CE(logits_i, label_i) / sum_i w_i`. Rows with zero weight
    /// are never read.
    pub fn masked_cross_entropy(&mut self, logits: Var, labels: &[usize], weights: &[f64]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let (rows, c) = split_last(&shape);
        if shape.is_empty() || labels.len() != rows || weights.len() != rows || c == 0 {
            return Err(invalid(
                "masked_cross_entropy",
                format!("logits {shape:?}, {} labels, {} weights", labels.len(), weights.len()),
            ));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(invalid("masked_cross_entropy", "weights must be finite and >= 0"));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(invalid("masked_cross_entropy", "all weights are zero"));
        }
        let src = self.data(logits.0);
        let mut sel_rows = Vec::new();
        let mut sel_labels = Vec::new();
        let mut scale = Vec::new();
        let mut probs = Vec::new();
        let mut loss = 0.0;
        for r in 0..rows {
            let w = weights[r];
            if w == 0.0 {
                continue;
            }
            let label = labels[r];
            if label >= c {
                return Err(TensorError::IndexOutOfRange {
                    op: "masked_cross_entropy",
                    index: label,
                    size: c,
                });
            }
            let row = &src[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            loss += w * (lse - row[label]);
            probs.extend(row.iter().map(|z| (z - lse).exp()));
            sel_rows.push(r);
            sel_labels.push(label);
            scale.push(w / total);
        }
        let needs = self.needs(&[logits.0]);
        self.push(
            "masked_cross_entropy",
            Tensor::scalar(loss / total),
            Op::CrossEntropy {
                logits: logits.0,
                rows: sel_rows,
                labels: sel_labels,
                scale,
                probs,
            },
            needs,
        )
    }

    /// Weighted mean binary cross-entropy on logits, computed stably.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64], weights: &[f64]) -> Result<Var> {
        let n = self.value(logits).numel();
        if targets.len() != n || weights.len() != n || n == 0 {
            return Err(invalid("bce_with_logits", "targets/weights do not match logits"));
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(*w >= 0.0)) || total <= 0.0 {
            return Err(invalid("bce_with_logits", "weights must be >= 0 with positive sum"));
        }
        let z = self.data(logits.0);
        let loss: f64 = (0..n)
            .map(|i| weights[i] * (z[i].max(0.0) - z[i] * targets[i] + (-z[i].abs()).exp().ln_1p()))
            .sum();
        let scale = weights.iter().map(|w| w / total).collect();
        let needs = self.needs(&[logits.0]);
        self.push(
            "bce_with_logits",
            Tensor::scalar(loss / total),
            Op::BceLogits {
                logits: logits.0,
                targets: targets.to_vec(),
                scale,
            },
            needs,
        )
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(invalid("backward", format!("loss has shape {:?}", self.shape(loss))));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |idx: usize, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[idx].needs_grad {
                return;
            }
            let buf = grads[idx].get_or_insert_with(|| vec![0.0; nodes[idx].value.numel()]);
            f(buf);
        };
        let out = nodes[i].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n, trans_b } => {
                let (va, vb) = (self.data(a), self.data(b));
                acc(a, &mut |da| {
                    let bm = if trans_b { Mat::rows(vb, k) } else { Mat::transposed(vb, n) };
                    gemm(m, n, k, Mat::rows(g, n), bm, da, 1.0);
                });
                acc(b, &mut |db| {
                    if trans_b {
                        gemm(n, m, k, Mat::transposed(g, n), Mat::rows(va, k), db, 1.0);
                    } else {
                        gemm(k, m, n, Mat::transposed(va, k), Mat::rows(g, n), db, 1.0);
                    }
                });
            }
            &Op::BatchMatMul { a, b, g: groups, m, k, n, trans_b } => {
                let (va, vb) = (self.data(a), self.data(b));
                acc(a, &mut |da| {
                    for gi in 0..groups {
                        let gb = &g[gi * m * n..(gi + 1) * m * n];
                        let bb = &vb[gi * k * n..(gi + 1) * k * n];
                        let bm = if trans_b { Mat::rows(bb, k) } else { Mat::transposed(bb, n) };
                        gemm(m, n, k, Mat::rows(gb, n), bm, &mut da[gi * m * k..(gi + 1) * m * k], 1.0);
                    }
                });
                acc(b, &mut |db| {
                    for gi in 0..groups {
                        let gb = &g[gi * m * n..(gi + 1) * m * n];
                        let ab = &va[gi * m * k..(gi + 1) * m * k];
                        let dst = &mut db[gi * k * n..(gi + 1) * k * n];
                        if trans_b {
                            gemm(n, m, k, Mat::transposed(gb, n), Mat::rows(ab, k), dst, 1.0);
                        } else {
                            gemm(k, m, n, Mat::transposed(ab, k), Mat::rows(gb, n), dst, 1.0);
                        }
                    }
                });
            }
            &Op::Add(a, b) => {
                acc(a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(b, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            &Op::Sub(a, b) => {
                acc(a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(b, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (self.data(a), self.data(b));
                acc(a, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * vb[j];
                    }
                });
                acc(b, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * va[j];
                    }
                });
            }
            &Op::Scale(x, c) => acc(x, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += c * y)),
            &Op::AddBias { x, bias } => {
                acc(x, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(bias, &mut |d| {
                    let n = d.len();
                    for (j, y) in g.iter().enumerate() {
                        d[j % n] += y;
                    }
                });
            }
            &Op::Gelu(x) => {
                let vx = self.data(x);
                acc(x, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * gelu_grad(vx[j]);
                    }
                });
            }
            &Op::Tanh(x) => acc(x, &mut |d| {
                for j in 0..d.len() {
                    d[j] += g[j] * (1.0 - out[j] * out[j]);
                }
            }),
            &Op::Sigmoid(x) => acc(x, &mut |d| {
                for j in 0..d.len() {
                    d[j] += g[j] * out[j] * (1.0 - out[j]);
                }
            }),
            &Op::Softmax(x) => {
                let n = nodes[i].value.last_dim();
                acc(x, &mut |d| {
                    for r in 0..d.len() / n {
                        let (y, gy) = (&out[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                        let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            d[r * n + j] += y[j] * (gy[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = nodes[i].value.last_dim();
                let rows = rstd.len();
                let gv = self.data(*gain);
                acc(*x, &mut |dx| {
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for j in 0..d {
                            let dxh = gr[j] * gv[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh[j];
                        }
                        mean_dxh /= d as f64;
                        mean_dxh_xh /= d as f64;
                        for j in 0..d {
                            let dxh = gr[j] * gv[j];
                            dx[r * d + j] += rstd[r] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                        }
                    }
                });
                acc(*gain, &mut |dg| {
                    for (j, (y, h)) in g.iter().zip(xhat).enumerate() {
                        dg[j % d] += y * h;
                    }
                });
                acc(*bias, &mut |db| {
                    for (j, y) in g.iter().enumerate() {
                        db[j % d] += y;
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = nodes[i].value.last_dim();
                acc(*table, &mut |dt| {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] += g[r * d + j];
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => acc(*x, &mut |d| {
                for j in 0..d.len() {
                    d[j] += g[j] * mask[j];
                }
            }),
            &Op::Reshape(x) => acc(x, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y)),
            Op::Permute { x, perm } => {
                let map = permute_map(self.nodes[*x].value.shape(), perm);
                acc(*x, &mut |d| {
                    for (o, &src) in map.iter().enumerate() {
                        d[src] += g[o];
                    }
                });
            }
            Op::Concat(inputs) => {
                let total = nodes[i].value.last_dim();
                let rows = g.len() / total.max(1);
                let mut off = 0;
                for &inp in inputs {
                    let w = nodes[inp].value.last_dim();
                    acc(inp, &mut |d| {
                        for r in 0..rows {
                            for j in 0..w {
                                d[r * w + j] += g[r * total + off + j];
                            }
                        }
                    });
                    off += w;
                }
            }
            &Op::SliceLast { x, start } => {
                let len = nodes[i].value.last_dim();
                let n = nodes[x].value.last_dim();
                acc(x, &mut |d| {
                    for r in 0..g.len() / len.max(1) {
                        for j in 0..len {
                            d[r * n + start + j] += g[r * len + j];
                        }
                    }
                });
            }
            &Op::SelectStep { x, t } => {
                let s = nodes[x].value.shape();
                let (b, l, dd) = (s[0], s[1], s[2]);
                acc(x, &mut |d| {
                    for bi in 0..b {
                        for j in 0..dd {
                            d[(bi * l + t) * dd + j] += g[bi * dd + j];
                        }
                    }
                });
            }
            Op::Stack(inputs) => {
                let s = nodes[i].value.shape();
                let (b, l, dd) = (s[0], s[1], s[2]);
                for (t, &inp) in inputs.iter().enumerate() {
                    acc(inp, &mut |d| {
                        for bi in 0..b {
                            for j in 0..dd {
                                d[bi * dd + j] += g[(bi * l + t) * dd + j];
                            }
                        }
                    });
                }
            }
            Op::WhereRows { a, b, mask } => {
                let w = g.len() / mask.len().max(1);
                acc(*a, &mut |d| {
                    for (r, &m) in mask.iter().enumerate() {
                        if m {
                            for j in r * w..(r + 1) * w {
                                d[j] += g[j];
                            }
                        }
                    }
                });
                acc(*b, &mut |d| {
                    for (r, &m) in mask.iter().enumerate() {
                        if !m {
                            for j in r * w..(r + 1) * w {
                                d[j] += g[j];
                            }
                        }
                    }
                });
            }
            Op::MaskKeys { x, valid } => acc(*x, &mut |d| {
                for j in 0..d.len() {
                    if valid[j] {
                        d[j] += g[j];
                    }
                }
            }),
            &Op::Time2Vec { tau, omega, phi } => {
                let (t, w, p) = (self.data(tau), self.data(omega), self.data(phi));
                let k = w.len();
                // cos of the periodic arguments, shared by all three gradients
                let mut c = vec![0.0; t.len() * k];
                for (n, &tv) in t.iter().enumerate() {
                    c[n * k] = 1.0;
                    for j in 1..k {
                        c[n * k + j] = (w[j] * tv + p[j]).cos();
                    }
                }
                acc(tau, &mut |d| {
                    for n in 0..d.len() {
                        d[n] += (0..k).map(|j| g[n * k + j] * c[n * k + j] * w[j]).sum::<f64>();
                    }
                });
                acc(omega, &mut |d| {
                    for (n, &tv) in t.iter().enumerate() {
                        for j in 0..k {
                            d[j] += g[n * k + j] * c[n * k + j] * tv;
                        }
                    }
                });
                acc(phi, &mut |d| {
                    for n in 0..t.len() {
                        for j in 0..k {
                            d[j] += g[n * k + j] * c[n * k + j];
                        }
                    }
                });
            }
            &Op::Sum(x) => acc(x, &mut |d| d.iter_mut().for_each(|v| *v += g[0])),
            &Op::Mean(x) => acc(x, &mut |d| {
                let s = g[0] / d.len() as f64;
                d.iter_mut().for_each(|v| *v += s);
            }),
            Op::CrossEntropy {
                logits,
                rows,
                labels,
                scale,
                probs,
            } => {
                let c = nodes[*logits].value.last_dim();
                acc(*logits, &mut |d| {
                    for (s, &r) in rows.iter().enumerate() {
                        let f = scale[s] * g[0];
                        for j in 0..c {
                            d[r * c + j] += f * probs[s * c + j];
                        }
                        d[r * c + labels[s]] -= f;
                    }
                });
            }
            Op::BceLogits { logits, targets, scale } => {
                let z = self.data(*logits);
                acc(*logits, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[0] * scale[j] * (sigmoid(z[j]) - targets[j]);
                    }
                });
            }
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
