//! Adam and the cosine learning-rate schedule.

use crate::error::{invalid, Result, TensorError};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates, one buffer per parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step_count: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub state: AdamState,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            state: AdamState::default(),
        }
    }

    /// One bias-corrected update using the gradients held in `store`.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(invalid("Adam::step", format!("learning rate {lr}")));
        }
        let st = &mut self.state;
        if st.m.is_empty() {
            for (_, _, t) in store.iter() {
                st.m.push(vec![0.0; t.numel()]);
                st.v.push(vec![0.0; t.numel()]);
            }
        }
        if st.m.len() != store.len() {
            return Err(TensorError::ShapeMismatch {
                op: "Adam::step",
                lhs: vec![st.m.len()],
                rhs: vec![store.len()],
            });
        }
        st.step_count += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = st.step_count as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (i, tensor) in store.tensors_mut().iter_mut().enumerate() {
            let (m, v) = (&mut st.m[i], &mut st.v[i]);
            if m.len() != tensor.numel() {
                return Err(TensorError::ShapeMismatch {
                    op: "Adam::step",
                    lhs: vec![m.len()],
                    rhs: tensor.shape().to_vec(),
                });
            }
            let (data, grad) = tensor.data_and_grad_mut();
            let Some(grad) = grad else { continue };
            for j in 0..data.len() {
                let g = grad[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                data[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Cosine annealing from `initial_lr` to `eta_min` over `period_epochs`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub initial_lr: f64,
    pub eta_min: f64,
    pub period_epochs: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            initial_lr: 2e-4,
            eta_min: 0.0,
            period_epochs: 1,
        }
    }
}

/// Learning rate at (possibly fractional) `epoch`.
pub fn cosine_lr(s: &LrSchedule, epoch: f64) -> Result<f64> {
    if s.period_epochs == 0 {
        return Err(invalid("cosine_lr", "period must be positive"));
    }
    let period = s.period_epochs as f64;
    if !(0.0..=period).contains(&epoch) {
        return Err(invalid("cosine_lr", format!("epoch {epoch} outside [0, {period}]")));
    }
    Ok(s.eta_min + (s.initial_lr - s.eta_min) * (1.0 + (std::f64::consts::PI * epoch / period).cos()) / 2.0)
}
