//! Scalar abstraction shared by every detector.
//!
//! All numerical code is generic over [`Real`], which is implemented for
//! `f32` and `f64`. Complex quantities are `num_complex::Complex<T>`.

use nalgebra::{DMatrix, DVector, RealField};
use num_complex::Complex;
use num_traits::{FromPrimitive, ToPrimitive};

/// Real floating-point scalar usable by the detectors.
pub trait Real:
    RealField + Copy + FromPrimitive + ToPrimitive + Send + Sync + 'static
{
    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn lit(x: f64) -> Self {
        nalgebra::convert(x)
    }

    #[inline]
    fn neg_inf() -> Self {
        Self::lit(f64::NEG_INFINITY)
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Complex GEMM kernel `C ← α·A·B + β·C` on raw strided storage.
    ///
    /// # Safety
    /// Pointers and strides must describe valid `m×k`, `k×n` and `m×n`
    /// operands, and `c` must not alias `a` or `b`.
    #[doc(hidden)]
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Complex<Self>,
        a: (*const Complex<Self>, isize, isize),
        b: (*const Complex<Self>, isize, isize),
        beta: Complex<Self>,
        c: (*mut Complex<Self>, isize, isize),
    );
}

macro_rules! impl_real {
    ($t:ty, $kernel:path) => {
        impl Real for $t {
            unsafe fn gemm_raw(
                m: usize,
                k: usize,
                n: usize,
                alpha: Complex<$t>,
                a: (*const Complex<$t>, isize, isize),
                b: (*const Complex<$t>, isize, isize),
                beta: Complex<$t>,
                c: (*mut Complex<$t>, isize, isize),
            ) {
                // `Complex<T>` is `repr(C)` with layout `[re, im]`.
                unsafe {
                    $kernel(
                        matrixmultiply::CGemmOption::Standard,
                        matrixmultiply::CGemmOption::Standard,
                        m,
                        k,
                        n,
                        [alpha.re, alpha.im],
                        a.0 as *const [$t; 2],
                        a.1,
                        a.2,
                        b.0 as *const [$t; 2],
                        b.1,
                        b.2,
                        [beta.re, beta.im],
                        c.0 as *mut [$t; 2],
                        c.1,
                        c.2,
                    )
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::cgemm);
impl_real!(f64, matrixmultiply::zgemm);

pub type C<T> = Complex<T>;
pub type CMatrix<T> = DMatrix<Complex<T>>;
pub type CVector<T> = DVector<Complex<T>>;

#[inline]
pub(crate) fn cplx<T: Real>(re: T, im: T) -> Complex<T> {
    Complex::new(re, im)
}

#[inline]
pub(crate) fn czero<T: Real>() -> Complex<T> {
    Complex::new(T::zero(), T::zero())
}

#[inline]
pub(crate) fn creal<T: Real>(re: T) -> Complex<T> {
    Complex::new(re, T::zero())
}

/// `|z|` without the `num_traits::Float` bound of `Complex::norm`.
#[inline]
pub(crate) fn cabs<T: Real>(z: Complex<T>) -> T {
    z.norm_sqr().sqrt()
}
