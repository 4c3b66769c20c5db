//! Scalar abstraction so the whole pipeline runs in either f64 (default) or f32.

use num_traits::Float;

/// Element type for tensors. Everything numeric is generic over this; f64 is
/// the default precision and f32 is selectable from config.
pub trait Real:
    Float
    + num_traits::NumAssignOps
    + Send
    + Sync
    + std::fmt::Debug
    + std::fmt::Display
    + 'static
{
    const NAME: &'static str;

    fn cast_from(v: f64) -> Self;
    fn cast_f64(self) -> f64;

    /// C := alpha * A@B + beta * C for arbitrary strides (row-major buffers).
    ///
    /// # Safety
    /// Pointers must be valid for the (m, k, n) extents under the given strides,
    /// exactly as required by `matrixmultiply`.
    unsafe fn gemm(
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

    #[inline]
    fn cast_from(v: f64) -> Self {
        v
    }

    #[inline]
    fn cast_f64(self) -> f64 {
        self
    }

    unsafe fn gemm(
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
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn cast_from(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn cast_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm(
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
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// out(m x n) += A(m x k) @ B(k x n), where `ta`/`tb` mark operands stored
/// transposed (A as k x m, B as n x k). `beta = 0` overwrites `out`.
pub fn gemm_into<R: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[R],
    ta: bool,
    b: &[R],
    tb: bool,
    beta: R,
    out: &mut [R],
) {
    assert_eq!(a.len(), m * k, "gemm lhs buffer size");
    assert_eq!(b.len(), k * n, "gemm rhs buffer size");
    assert_eq!(out.len(), m * n, "gemm out buffer size");
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        R::gemm(
            m,
            k,
            n,
            R::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
