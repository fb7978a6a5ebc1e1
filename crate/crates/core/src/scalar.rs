//! Scalar abstraction for the numeric core.
//!
//! All tensor math is generic over [`Scalar`] so the same code runs in f32 or
//! f64. The agent stack uses the `f64` aliases exported from the crate root;
//! desk-scale sizes make the extra precision cheaper than debugging drift.

use std::fmt;

/// Floating-point scalar usable by the tensor/tape machinery.
pub trait Scalar:
    num_traits::Float + num_traits::FromPrimitive + num_traits::NumCast + fmt::Debug + fmt::Display + 'static
{
    /// Lossless-enough conversion for reporting and serialization.
    fn to_f64_lossy(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("scalar convertible to f64")
    }

    /// Conversion from f64 constants (hyperparameters, literals).
    fn from_f64_lossy(v: f64) -> Self {
        num_traits::NumCast::from(v).expect("f64 convertible to scalar")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
