//! Random initializers.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::tensor::Tensor;

/// Normal(0, std) resampled until inside two standard deviations.
pub fn trunc_normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let d = Normal::new(0.0, 1.0).expect("unit normal");
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = d.sample(rng);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}

pub fn normal<R: Rng + ?Sized>(shape: &[usize], mean: f64, std: f64, rng: &mut R) -> Tensor {
    let d = Normal::new(mean, std).expect("finite std");
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| d.sample(rng)).collect()).expect("length matches shape")
}

/// Uniform on `[lo, hi)`.
pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Tensor {
    let d = Uniform::new(lo, hi);
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| d.sample(rng)).collect()).expect("length matches shape")
}
