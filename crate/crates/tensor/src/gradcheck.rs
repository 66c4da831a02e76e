//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::{Bound, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct CheckOptions {
    /// Finite-difference step.
    pub h: f64,
    /// Denominator floor for the relative error.
    pub floor: f64,
    /// Entries probed per tensor; `None` probes all of them.
    pub max_entries: Option<usize>,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            floor: 1e-3,
            max_entries: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares backprop gradients of a scalar `f` with central differences for
/// every parameter in `store`. `f` must be deterministic.
pub fn check_params<F>(store: &mut ParamStore, opts: CheckOptions, f: F) -> Result<CheckReport>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let out = f(&mut tape, &b)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let out = f(&mut tape, &bound)?;
    let grads = tape.backward(out)?;
    let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| {
            grads
                .get(bound.var(id))
                .map_or_else(|| vec![0.0; store.get(id).numel()], <[f64]>::to_vec)
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = CheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    for (pi, &id) in ids.iter().enumerate() {
        let n = store.get(id).numel();
        let entries: Vec<usize> = match opts.max_entries {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for j in entries {
            let orig = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = orig + opts.h;
            let up = eval(store)?;
            store.get_mut(id).data_mut()[j] = orig - opts.h;
            let down = eval(store)?;
            store.get_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * opts.h);
            let e = rel_err(analytic[pi][j], numeric, opts.floor);
            report.checked += 1;
            if e > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = e;
                report.worst = Some((store.name(id).to_string(), j));
            }
        }
    }
    Ok(report)
}

/// Convenience wrapper: checks `f` with respect to each tensor in `inputs`.
pub fn check_inputs<F>(inputs: &[Tensor], opts: CheckOptions, f: F) -> Result<CheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut store = ParamStore::new();
    let ids = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| store.insert(format!("input{i}"), t.detached()))
        .collect::<Result<Vec<_>>>()?;
    check_params(&mut store, opts, |tape, b| {
        let vars: Vec<Var> = ids.iter().map(|&id| b.var(id)).collect();
        f(tape, &vars)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catches_a_wrong_gradient() {
        // mul is correct, so a deliberately wrong "analytic" value must show
        // up as a large relative error through rel_err alone
        assert!(rel_err(1.0, 2.0, 1e-3) > 0.4);
        assert_eq!(rel_err(0.0, 0.0, 1e-3), 0.0);
        let x = Tensor::new([3], vec![0.3, -1.2, 2.0]).unwrap();
        let r = check_inputs(&[x], CheckOptions::default(), |t, v| {
            let y = t.mul(v[0], v[0])?;
            t.sum(y)
        })
        .unwrap();
        assert_eq!(r.checked, 3);
        assert!(r.max_rel_err < 1e-8, "{r:?}");
    }

    #[test]
    fn sampling_caps_entries() {
        let x = Tensor::zeros([50]);
        let opts = CheckOptions {
            max_entries: Some(7),
            ..Default::default()
        };
        let r = check_inputs(&[x], opts, |t, v| t.sum(v[0])).unwrap();
        assert_eq!(r.checked, 7);
    }
}
