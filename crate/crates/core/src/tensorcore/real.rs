use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;

/// Floating-point element type of a [`Graph`](super::Graph).
///
/// `f64` is used for gradient checking, `f32` for training runs.
pub trait Real: Float + Default + Debug + Display + Sum + Send + Sync + 'static {
    const NAME: &'static str;

    fn cst(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `c ← α·a·b + β·c` on strided row/column-major views.
    ///
    /// # Safety
    /// Every element addressed through the strides must lie inside the
    /// corresponding pointer's allocation.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f64 {
    const NAME: &'static str = "f64";

    fn cst(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f32 {
    const NAME: &'static str = "f32";

    fn cst(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Strided view of an `rows × cols` matrix inside a slice.
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatView {
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl MatView {
    pub fn row_major(rows: usize, cols: usize) -> Self {
        Self { rows, cols, rs: cols, cs: 1 }
    }

    pub fn t(self) -> Self {
        Self { rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }

    fn extent(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.rs + (self.cols - 1) * self.cs + 1
        }
    }
}

/// Bounds-checked `c ← a·b + beta·c`.
pub(crate) fn gemm<T: Real>(a: &[T], av: MatView, b: &[T], bv: MatView, beta: T, c: &mut [T], cv: MatView) {
    assert_eq!(av.cols, bv.rows, "gemm inner dimension");
    assert_eq!((av.rows, bv.cols), (cv.rows, cv.cols), "gemm output shape");
    assert!(av.extent() <= a.len() && bv.extent() <= b.len() && cv.extent() <= c.len());
    if cv.rows == 0 || cv.cols == 0 {
        return;
    }
    // SAFETY: extents checked above; strides are non-negative.
    unsafe {
        T::gemm_raw(
            av.rows,
            av.cols,
            bv.cols,
            T::one(),
            a.as_ptr(),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr(),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr(),
            cv.rs as isize,
            cv.cs as isize,
        )
    }
}

const LANES: usize = 8;

/// `Σ f(x)` with independent per-lane accumulators so the loop vectorizes.
pub(crate) fn lane_sum_by<T: Real>(xs: &[T], f: impl Fn(T) -> T) -> T {
    let mut acc = [T::zero(); LANES];
    let chunks = xs.chunks_exact(LANES);
    let tail = chunks.remainder();
    for c in chunks {
        for (a, &v) in acc.iter_mut().zip(c) {
            *a = *a + f(v);
        }
    }
    tail.iter().fold(acc.iter().fold(T::zero(), |s, &a| s + a), |s, &v| s + f(v))
}

pub(crate) fn lane_sum<T: Real>(xs: &[T]) -> T {
    lane_sum_by(xs, |v| v)
}

/// Dot product with per-lane accumulators.
pub(crate) fn lane_dot<T: Real>(xs: &[T], ys: &[T]) -> T {
    let mut acc = [T::zero(); LANES];
    let (cx, cy) = (xs.chunks_exact(LANES), ys.chunks_exact(LANES));
    let tail: T = cx.remainder().iter().zip(cy.remainder()).fold(T::zero(), |s, (&a, &b)| s + a * b);
    for (a8, b8) in cx.zip(cy) {
        for k in 0..LANES {
            acc[k] = acc[k] + a8[k] * b8[k];
        }
    }
    acc.iter().fold(tail, |s, &a| s + a)
}

/// `x − x` is zero for finite `x` and NaN otherwise; the lane sums stay
/// finite exactly when every element is.
#[allow(clippy::eq_op)]
pub(crate) fn all_finite<T: Real>(xs: &[T]) -> bool {
    let mut acc = [T::zero(); LANES];
    let chunks = xs.chunks_exact(LANES);
    let tail_ok = chunks.remainder().iter().all(|v| v.is_finite());
    for c in chunks {
        for (a, &v) in acc.iter_mut().zip(c) {
            *a = *a + (v - v);
        }
    }
    tail_ok && acc.iter().all(|a| *a == T::zero())
}
