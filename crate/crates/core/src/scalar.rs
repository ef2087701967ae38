//! Scalar abstraction so the numeric core runs in either f32 or f64.
//!
//! Training normally runs in [`crate::Real`] (f32). Gradient checks and the
//! PCA/encoder geometry run in f64, where central finite differences are
//! meaningful at tight tolerances.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

/// Floating-point scalar usable throughout the tensor and model code.
pub trait Scalar:
    Float + NumAssignOps + FromPrimitive + ToPrimitive + Sum<Self> + Debug + Display + Send + Sync + 'static
{
    /// Type tag persisted in checkpoints ("f32" / "f64").
    const DTYPE: &'static str;

    /// Lossy cast from f64 (the crate computes features and metrics in f64).
    fn cast(v: f64) -> Self;

    /// Widen to f64.
    fn as_f64(self) -> f64;

    /// One draw from the standard normal distribution.
    fn sample_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;

    /// One draw from `U[lo, hi)`.
    fn sample_uniform<R: Rng + ?Sized>(rng: &mut R, lo: Self, hi: Self) -> Self;
}

macro_rules! impl_scalar {
    ($($t:ty => $tag:literal),*) => {$(
        impl Scalar for $t {
            const DTYPE: &'static str = $tag;

            #[inline]
            fn cast(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            #[inline]
            fn sample_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
                StandardNormal.sample(rng)
            }

            #[inline]
            fn sample_uniform<R: Rng + ?Sized>(rng: &mut R, lo: Self, hi: Self) -> Self {
                Uniform::new(lo, hi).expect("uniform bounds").sample(rng)
            }
        }
    )*};
}

impl_scalar!(f32 => "f32", f64 => "f64");
