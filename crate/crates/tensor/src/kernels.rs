//! Thin safe wrapper over the GEMM kernel.

/// Strided view of a row-major matrix operand.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f64],
    pub rs: usize,
    pub cs: usize,
}

impl<'a> Mat<'a> {
    /// `rows x cols` row-major matrix.
    pub fn rows(data: &'a [f64], cols: usize) -> Self {
        Self { data, rs: cols, cs: 1 }
    }

    /// Transposed view of a row-major `rows x cols` matrix.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        Self { data, rs: 1, cs: cols }
    }

    fn max_offset(&self, r: usize, c: usize) -> usize {
        if r == 0 || c == 0 {
            0
        } else {
            (r - 1) * self.rs + (c - 1) * self.cs + 1
        }
    }
}

/// `c[m x n] = beta * c + a[m x k] * b[k x n]`, with `c` row-major.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: Mat<'_>, b: Mat<'_>, c: &mut [f64], beta: f64) {
    assert!(a.data.len() >= a.max_offset(m, k), "gemm: lhs too short");
    assert!(b.data.len() >= b.max_offset(k, n), "gemm: rhs too short");
    assert!(c.len() >= m * n, "gemm: output too short");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|x| *x *= beta);
        return;
    }
    // SAFETY: the asserts above bound every offset the kernel reads or writes
    // for the given extents and strides; `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matches_naive_including_transposed_views() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let expect = naive(m, k, n, &a, &b);
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, Mat::rows(&a, k), Mat::rows(&b, n), &mut c, 0.0);
        for (x, y) in c.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
        // b stored transposed as [n x k]
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut c2 = vec![0.0; m * n];
        gemm(m, k, n, Mat::rows(&a, k), Mat::transposed(&bt, k), &mut c2, 0.0);
        for (x, y) in c2.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
