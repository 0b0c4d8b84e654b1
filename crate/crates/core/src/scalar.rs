//! Element types for volumes and operators.
//!
//! Runtime code uses `f32`; gradient checks instantiate the same code with
//! `f64`. The trait carries the one primitive that has to be dispatched per
//! type, a strided matrix multiply.

use num_traits::{Float, FromPrimitive, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + 'static
{
    /// `c = alpha * a * b + beta * c` with explicit row/column strides.
    ///
    /// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal fits element type")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

fn span(rows: usize, cols: usize, (rs, cs): (isize, isize)) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    (rows - 1) * rs.unsigned_abs() + (cols - 1) * cs.unsigned_abs() + 1
}

macro_rules! impl_scalar {
    ($t:ty, $f:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
                c_strides: (isize, isize),
            ) {
                assert!(span(m, k, a_strides) <= a.len(), "gemm: lhs out of bounds");
                assert!(span(k, n, b_strides) <= b.len(), "gemm: rhs out of bounds");
                assert!(span(m, n, c_strides) <= c.len(), "gemm: output out of bounds");
                assert!(a_strides.0 >= 0 && a_strides.1 >= 0);
                assert!(b_strides.0 >= 0 && b_strides.1 >= 0);
                assert!(c_strides.0 >= 0 && c_strides.1 >= 0);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: the asserts above keep every addressed element
                // inside the borrowed slices, and `c` is borrowed uniquely.
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0,
                        c_strides.1,
                    )
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);
