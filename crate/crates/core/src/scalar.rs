//! Floating point scalar abstraction.
//!
//! Everything numeric in the crate is generic over [`Scalar`]; `f64` is the
//! reference precision and `f32` is available for faster training/scoring.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Floating point type usable by the detectors: `f32` or `f64`.
pub trait Scalar:
    Float + FloatConst + FromPrimitive + ToPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Machine epsilon of the type, as `f64`.
    const EPSILON_F64: f64;

    /// `c <- alpha * a * b + beta * c` for row-major `a` (m x k), `b` (k x n),
    /// `c` (m x n). `b_transposed` means `b` is stored as (n x k).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_transposed: bool,
        b: &[Self],
        b_transposed: bool,
        beta: Self,
        c: &mut [Self],
    );

    #[inline]
    fn of(v: f64) -> Self {
        // f64 -> f32/f64 never fails (out of range saturates to inf)
        Self::from_f64(v).unwrap()
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap()
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            const EPSILON_F64: f64 = <$t>::EPSILON as f64;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_transposed: bool,
                b: &[Self],
                b_transposed: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                // strides in elements: (row stride, column stride)
                let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
                // SAFETY: slice lengths were checked above and the strides
                // describe exactly the row-major layouts of the operands.
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
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);
