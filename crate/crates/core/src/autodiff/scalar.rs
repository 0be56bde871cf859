//! Floating-point abstraction shared by the `f32` and `f64` tape instantiations.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

/// Element type for tensors and tapes.
///
/// The only non-arithmetic requirement is a dense row-major matrix multiply,
/// which dispatches to the `matrixmultiply` kernels for both widths.
pub trait Scalar:
    Copy
    + PartialOrd
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn abs(self) -> Self;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn is_finite(self) -> bool;
    fn maxv(self, other: Self) -> Self;
    fn minv(self, other: Self) -> Self;

    /// `c[m, n] = a[m, k] @ b[k, n]` with explicit row/column strides for the
    /// inputs, so transposed reads never copy. `c` is contiguous row-major.
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        c: &mut [Self],
    );
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path, $tanh:expr) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            #[inline]
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            #[inline]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline]
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            #[inline]
            fn tanh(self) -> Self {
                $tanh(self)
            }
            #[inline]
            fn sin(self) -> Self {
                <$t>::sin(self)
            }
            #[inline]
            fn cos(self) -> Self {
                <$t>::cos(self)
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            #[inline]
            fn maxv(self, other: Self) -> Self {
                <$t>::max(self, other)
            }
            #[inline]
            fn minv(self, other: Self) -> Self {
                <$t>::min(self, other)
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                c: &mut [Self],
            ) {
                assert!(c.len() >= m * n, "gemm: output buffer too small");
                if m == 0 || k == 0 || n == 0 {
                    c[..m * n].fill(0.0);
                    return;
                }
                // Safety: buffer sizes are checked against the strides below;
                // the kernels only read within [0, (dim-1)*stride] per axis.
                let max_a = (m - 1) as isize * rsa + (k - 1) as isize * csa;
                let max_b = (k - 1) as isize * rsb + (n - 1) as isize * csb;
                assert!(max_a >= 0 && (max_a as usize) < a.len(), "gemm: lhs strides out of range");
                assert!(max_b >= 0 && (max_b as usize) < b.len(), "gemm: rhs strides out of range");
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        0.0,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

/// `tanh` via `expm1`, which is measurably faster than libm `tanhf` and has
/// no cancellation near zero. Training runs in `f32` lean on this heavily
/// (every Mish evaluation takes one).
#[inline]
fn tanh_f32(x: f32) -> f32 {
    if x > 9.02 {
        return 1.0;
    }
    if x < -9.02 {
        return -1.0;
    }
    let e = (2.0 * x).exp_m1();
    e / (e + 2.0)
}

impl_scalar!(f32, matrixmultiply::sgemm, tanh_f32);
impl_scalar!(f64, matrixmultiply::dgemm, f64::tanh);
