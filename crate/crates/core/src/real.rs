//! Scalar abstraction so the same code runs in 32-bit (training) and
//! 64-bit (verification) precision.

use core::fmt::{Debug, Display};
use core::iter::Sum;

use num_traits::Float;

pub trait Real: Float + Default + Debug + Display + Sum + Send + Sync + 'static {
    fn of(x: f64) -> Self;
    fn f64(self) -> f64;
    fn from_usize(n: usize) -> Self {
        Self::of(n as f64)
    }

    /// `c[m,n] += a[m,k] · b[k,n]` where `a` and `b` are addressed through
    /// `(row stride, column stride)` pairs and `c` is row-major.
    fn gemm_acc(
        dims: (usize, usize, usize),
        a: &[Self],
        sa: (usize, usize),
        b: &[Self],
        sb: (usize, usize),
        c: &mut [Self],
    );
}

fn check_gemm<T>(
    dims: (usize, usize, usize),
    a: &[T],
    sa: (usize, usize),
    b: &[T],
    sb: (usize, usize),
    c: &[T],
) {
    let (m, k, n) = dims;
    let last = |rows: usize, cols: usize, s: (usize, usize)| {
        (rows.max(1) - 1) * s.0 + (cols.max(1) - 1) * s.1
    };
    assert!(
        m * k == 0 || last(m, k, sa) < a.len(),
        "gemm: lhs out of bounds"
    );
    assert!(
        k * n == 0 || last(k, n, sb) < b.len(),
        "gemm: rhs out of bounds"
    );
    assert!(c.len() >= m * n, "gemm: output too small");
}

impl Real for f32 {
    fn gemm_acc(
        dims: (usize, usize, usize),
        a: &[Self],
        sa: (usize, usize),
        b: &[Self],
        sb: (usize, usize),
        c: &mut [Self],
    ) {
        check_gemm(dims, a, sa, b, sb, c);
        let (m, k, n) = dims;
        if m * k * n == 0 {
            return;
        }
        // SAFETY: every address touched lies inside the checked slices.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                sa.0 as isize,
                sa.1 as isize,
                b.as_ptr(),
                sb.0 as isize,
                sb.1 as isize,
                1.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn gemm_acc(
        dims: (usize, usize, usize),
        a: &[Self],
        sa: (usize, usize),
        b: &[Self],
        sb: (usize, usize),
        c: &mut [Self],
    ) {
        check_gemm(dims, a, sa, b, sb, c);
        let (m, k, n) = dims;
        if m * k * n == 0 {
            return;
        }
        // SAFETY: every address touched lies inside the checked slices.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                sa.0 as isize,
                sa.1 as isize,
                b.as_ptr(),
                sb.0 as isize,
                sb.1 as isize,
                1.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn f64(self) -> f64 {
        self
    }
}
