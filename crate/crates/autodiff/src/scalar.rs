use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, NumAssign};

/// Element type usable by the tensor engine. Implemented for `f32` and `f64`.
///
/// Brings the float machinery we need (transcendentals, assignment ops) plus
/// a dispatch point for the gemm kernel, which is monomorphic per dtype.
pub trait Scalar: Float + NumAssign + Sum + Debug + Display + Send + Sync + 'static {
    const DTYPE: &'static str;

    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;

    /// C := alpha * A * B + beta * C with explicit element strides, so the
    /// same kernel serves plain, transposed and sliced operands.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

macro_rules! impl_scalar {
    ($ty:ty, $dtype:expr, $gemm:path) => {
        impl Scalar for $ty {
            const DTYPE: &'static str = $dtype;

            #[inline]
            fn from_f64(x: f64) -> Self {
                x as $ty
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            #[allow(clippy::too_many_arguments)]
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, "f32", matrixmultiply::sgemm);
impl_scalar!(f64, "f64", matrixmultiply::dgemm);

/// y := alpha * a @ b + beta * y, all row-major: a is m x k, b is k x n.
#[allow(clippy::too_many_arguments)]
pub fn mm_nn<F: Scalar>(m: usize, k: usize, n: usize, alpha: F, a: &[F], b: &[F], beta: F, y: &mut [F]) {
    F::gemm(m, k, n, alpha, a, k as isize, 1, b, n as isize, 1, beta, y, n as isize, 1);
}

/// y := alpha * a @ b^T + beta * y; a is m x k, b is n x k (row-major).
#[allow(clippy::too_many_arguments)]
pub fn mm_nt<F: Scalar>(m: usize, k: usize, n: usize, alpha: F, a: &[F], b: &[F], beta: F, y: &mut [F]) {
    F::gemm(m, k, n, alpha, a, k as isize, 1, b, 1, k as isize, beta, y, n as isize, 1);
}

/// y := alpha * a^T @ b + beta * y; a is k x m, b is k x n (row-major).
#[allow(clippy::too_many_arguments)]
pub fn mm_tn<F: Scalar>(m: usize, k: usize, n: usize, alpha: F, a: &[F], b: &[F], beta: F, y: &mut [F]) {
    F::gemm(m, k, n, alpha, a, 1, m as isize, b, n as isize, 1, beta, y, n as isize, 1);
}
