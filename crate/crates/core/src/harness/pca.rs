use cehr_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Residual tolerance for each eigenpair, relative to the largest eigenvalue.
pub const PCA_TOL: f64 = 1e-13;
const MAX_ITER: usize = 1_000_000;

fn matvec(c: &[f64], d: usize, v: &[f64]) -> Vec<f64> {
    (0..d).map(|i| (0..d).map(|j| c[i * d + j] * v[j]).sum()).collect()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

fn orthogonalize(v: &mut [f64], against: &[Vec<f64>]) {
    for u in against {
        let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
        v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
    }
}

/// Leading eigenpair of a symmetric PSD matrix by power iteration, kept
/// orthogonal to the axes already found.
fn top_eigen(c: &[f64], d: usize, scale: f64, found: &[Vec<f64>], rng: &mut ChaCha8Rng) -> (f64, Vec<f64>) {
    let mut v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    orthogonalize(&mut v, found);
    normalize(&mut v);
    let mut lambda = 0.0;
    for _ in 0..MAX_ITER {
        let mut w = matvec(c, d, &v);
        orthogonalize(&mut w, found);
        lambda = v.iter().zip(&w).map(|(a, b)| a * b).sum();
        let resid = w.iter().zip(&v).map(|(wi, vi)| (wi - lambda * vi).powi(2)).sum::<f64>().sqrt();
        if resid <= PCA_TOL * scale {
            break;
        }
        if normalize(&mut w) == 0.0 {
            return (0.0, v);
        }
        v = w;
    }
    (lambda.max(0.0), v)
}

/// Flips `v` so its first loading that is not numerically zero is positive.
fn orient(v: &mut [f64]) {
    let big = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-9 * big) {
        if *first < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

/// Projects mean-centered rows onto the top two covariance eigenvectors.
pub fn pca_2d(rows: &Tensor) -> Result<Vec<[f64; 2]>> {
    let shape = rows.shape();
    if shape.len() != 2 {
        return Err(Error::Data(format!("pca needs a matrix, got shape {shape:?}")));
    }
    let (n, d) = (shape[0], shape[1]);
    if n < 2 {
        return Err(Error::Data(format!("pca needs at least 2 rows, got {n}")));
    }
    let x = rows.data();
    let mean: Vec<f64> = (0..d).map(|j| (0..n).map(|i| x[i * d + j]).sum::<f64>() / n as f64).collect();
    let xc: Vec<f64> = (0..n * d).map(|k| x[k] - mean[k % d]).collect();
    let mut c = vec![0.0; d * d];
    for i in 0..n {
        let r = &xc[i * d..(i + 1) * d];
        for a in 0..d {
            for b in 0..d {
                c[a * d + b] += r[a] * r[b];
            }
        }
    }
    c.iter_mut().for_each(|v| *v /= (n - 1) as f64);
    let scale = (0..d).map(|i| c[i * d + i]).sum::<f64>();
    if scale == 0.0 {
        return Ok(vec![[0.0, 0.0]; n]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut axes = Vec::new();
    for _ in 0..2.min(d) {
        let (l, mut v) = top_eigen(&c, d, scale, &axes, &mut rng);
        for a in 0..d {
            for b in 0..d {
                c[a * d + b] -= l * v[a] * v[b];
            }
        }
        orient(&mut v);
        axes.push(v);
    }
    Ok((0..n)
        .map(|i| {
            let r = &xc[i * d..(i + 1) * d];
            let mut p = [0.0; 2];
            for (k, v) in axes.iter().enumerate() {
                p[k] = r.iter().zip(v).map(|(a, b)| a * b).sum();
            }
            p
        })
        .collect())
}
