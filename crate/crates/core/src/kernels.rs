//! Row-major GEMM wrappers and small dense loops.

#[cfg(test)]
use alloc::{vec, vec::Vec};

use crate::real::Real;

/// `out[n,m] += a[n,k] · b[k,m]`
pub(crate) fn matmul_acc<F: Real>(a: &[F], b: &[F], out: &mut [F], n: usize, k: usize, m: usize) {
    F::gemm_acc((n, k, m), a, (k, 1), b, (m, 1), out);
}

/// `out[k,m] += a[n,k]ᵀ · c[n,m]`
pub(crate) fn matmul_at_acc<F: Real>(
    a: &[F],
    c: &[F],
    out: &mut [F],
    n: usize,
    k: usize,
    m: usize,
) {
    F::gemm_acc((k, n, m), a, (1, k), c, (m, 1), out);
}

/// `out[n,m] += a[n,k] · b[m,k]ᵀ`
pub(crate) fn matmul_bt_acc<F: Real>(
    a: &[F],
    b: &[F],
    out: &mut [F],
    n: usize,
    k: usize,
    m: usize,
) {
    F::gemm_acc((n, k, m), a, (k, 1), b, (1, k), out);
}

#[cfg(test)]
pub(crate) fn transpose<F: Real>(a: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut t = vec![F::zero(); a.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

#[inline]
pub(crate) fn axpy<F: Real>(alpha: F, x: &[F], y: &mut [F]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

/// Dot product with four interleaved partial sums; faster, fixed order.
#[inline]
pub(crate) fn dot4<F: Real>(x: &[F], y: &[F]) -> F {
    let n = x.len().min(y.len());
    let chunks = n / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (F::zero(), F::zero(), F::zero(), F::zero());
    for c in 0..chunks {
        let i = c * 4;
        s0 = s0 + x[i] * y[i];
        s1 = s1 + x[i + 1] * y[i + 1];
        s2 = s2 + x[i + 2] * y[i + 2];
        s3 = s3 + x[i + 3] * y[i + 3];
    }
    let mut acc = (s0 + s1) + (s2 + s3);
    for i in chunks * 4..n {
        acc = acc + x[i] * y[i];
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                for p in 0..k {
                    out[i * m + j] += a[i * k + p] * b[p * m + j];
                }
            }
        }
        out
    }

    #[test]
    fn matmul_variants_match_triple_loop() {
        for &(n, k, m) in &[(1, 1, 1), (4, 3, 16), (7, 5, 33), (9, 17, 18), (12, 8, 48)] {
            let a: Vec<f64> = (0..n * k).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
            let b: Vec<f64> = (0..k * m).map(|i| ((i * 5) % 13) as f64 - 6.0).collect();
            let mut out = vec![1.0; n * m];
            matmul_acc(&a, &b, &mut out, n, k, m);
            let expect: Vec<f64> = naive(&a, &b, n, k, m).iter().map(|x| x + 1.0).collect();
            assert_eq!(out, expect, "{n}x{k}x{m}");
            let c: Vec<f64> = (0..n * m).map(|i| ((i * 3) % 7) as f64).collect();
            let mut g = vec![0.0; k * m];
            matmul_at_acc(&a, &c, &mut g, n, k, m);
            assert_eq!(g, naive(&transpose(&a, n, k), &c, k, n, m));
            let bt = transpose(&b, k, m);
            let mut o = vec![0.0; n * m];
            matmul_bt_acc(&a, &bt, &mut o, n, k, m);
            assert_eq!(o, naive(&a, &b, n, k, m));
        }
    }

    #[test]
    fn transpose_round_trip() {
        let a: Vec<f64> = (0..12).map(|x| x as f64).collect();
        let t = transpose(&a, 3, 4);
        assert_eq!(t[3 + 2], a[2 * 4 + 1]);
        assert_eq!(transpose(&t, 4, 3), a);
    }

    #[test]
    fn dot4_exact_on_integers() {
        let x: Vec<f64> = (0..11).map(|i| i as f64).collect();
        let y: Vec<f64> = (0..11).map(|i| (i * 2) as f64).collect();
        let direct: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
        assert_eq!(direct, dot4(&x, &y));
    }
}
