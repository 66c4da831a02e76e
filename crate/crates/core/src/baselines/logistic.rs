use cehr_tensor::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sparse feature row: `(column, value)` pairs.
pub type SparseRow = Vec<(usize, f64)>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LogisticConfig {
    /// Penalty `l2/2 * |w|^2` added to the summed log loss. The bias is not
    /// penalized.
    pub l2: f64,
    pub max_iter: usize,
    /// Stop once the gradient norm falls below this.
    pub tol: f64,
    /// Fixed step size; backtracking line search when absent.
    pub lr: Option<f64>,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        Self {
            l2: 1.0,
            max_iter: 5000,
            tol: 1e-6,
            lr: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub l2: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogisticFit {
    pub model: LinearModel,
    /// Objective before each step, then the final value.
    pub losses: Vec<f64>,
    pub grad_norm: f64,
    pub converged: bool,
}

fn log1p_exp(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl LinearModel {
    pub fn zeros(dim: usize, l2: f64) -> Self {
        Self {
            weights: vec![0.0; dim],
            bias: 0.0,
            l2,
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn logit(&self, x: &[(usize, f64)]) -> f64 {
        self.bias + x.iter().map(|&(j, v)| self.weights[j] * v).sum::<f64>()
    }

    pub fn predict(&self, xs: &[SparseRow]) -> Vec<f64> {
        xs.iter().map(|x| sigmoid(self.logit(x))).collect()
    }

    /// Regularized summed log loss.
    pub fn objective(&self, xs: &[SparseRow], ys: &[f64]) -> f64 {
        let data: f64 = xs
            .iter()
            .zip(ys)
            .map(|(x, &y)| {
                let z = self.logit(x);
                log1p_exp(z) - y * z
            })
            .sum();
        data + 0.5 * self.l2 * self.weights.iter().map(|w| w * w).sum::<f64>()
    }

    /// Gradient of [`objective`](Self::objective): weights then bias.
    pub fn gradient(&self, xs: &[SparseRow], ys: &[f64]) -> (Vec<f64>, f64) {
        let mut gw: Vec<f64> = self.weights.iter().map(|w| self.l2 * w).collect();
        let mut gb = 0.0;
        for (x, &y) in xs.iter().zip(ys) {
            let r = sigmoid(self.logit(x)) - y;
            gb += r;
            for &(j, v) in x {
                gw[j] += r * v;
            }
        }
        (gw, gb)
    }

    pub fn to_params(&self) -> Result<ParamStore> {
        let mut s = ParamStore::new();
        s.insert("lr.w", Tensor::new([self.dim()], self.weights.clone())?)?;
        s.insert("lr.b", Tensor::scalar(self.bias))?;
        s.insert("lr.l2", Tensor::scalar(self.l2))?;
        Ok(s)
    }

    pub fn from_params(s: &ParamStore) -> Result<Self> {
        Ok(Self {
            weights: s.by_name("lr.w")?.data().to_vec(),
            bias: s.by_name("lr.b")?.item(),
            l2: s.by_name("lr.l2")?.item(),
        })
    }
}

fn norm(gw: &[f64], gb: f64) -> f64 {
    (gw.iter().map(|g| g * g).sum::<f64>() + gb * gb).sqrt()
}

/// Full-batch gradient descent on the L2-regularized log loss. Deterministic.
pub fn train_logistic(xs: &[SparseRow], ys: &[f64], dim: usize, cfg: &LogisticConfig) -> Result<LogisticFit> {
    if xs.len() != ys.len() {
        return Err(Error::Data(format!("{} rows but {} labels", xs.len(), ys.len())));
    }
    let pos = ys.iter().filter(|&&y| y == 1.0).count();
    if ys.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::Data("labels must be 0 or 1".into()));
    }
    if pos == 0 || pos == ys.len() {
        return Err(Error::Data("logistic regression needs both classes".into()));
    }
    if let Some(&(j, _)) = xs.iter().flatten().find(|&&(j, _)| j >= dim) {
        return Err(Error::Data(format!("feature column {j} outside dimension {dim}")));
    }
    if cfg.l2 < 0.0 || cfg.lr.is_some_and(|lr| lr <= 0.0) {
        return Err(Error::Config("l2 must be >= 0 and lr > 0".into()));
    }
    let mut m = LinearModel::zeros(dim, cfg.l2);
    let mut f = m.objective(xs, ys);
    let mut losses = vec![f];
    let mut step = cfg.lr.unwrap_or(1.0);
    let (mut gw, mut gb) = m.gradient(xs, ys);
    let mut g = norm(&gw, gb);
    for _ in 0..cfg.max_iter {
        if g <= cfg.tol {
            break;
        }
        let trial = |m: &LinearModel, s: f64| LinearModel {
            weights: m.weights.iter().zip(&gw).map(|(w, g)| w - s * g).collect(),
            bias: m.bias - s * gb,
            l2: m.l2,
        };
        let mut next = trial(&m, step);
        let mut fn_ = next.objective(xs, ys);
        if cfg.lr.is_none() {
            // Armijo backtracking, then let the step grow again.
            while fn_ > f - 0.5 * step * g * g && step > 1e-16 {
                step *= 0.5;
                next = trial(&m, step);
                fn_ = next.objective(xs, ys);
            }
        }
        m = next;
        f = fn_;
        losses.push(f);
        (gw, gb) = m.gradient(xs, ys);
        g = norm(&gw, gb);
        if cfg.lr.is_none() {
            step *= 2.0;
        }
    }
    Ok(LogisticFit {
        model: m,
        losses,
        grad_norm: g,
        converged: g <= cfg.tol,
    })
}
