//! Scalar abstraction shared by kernels, environments and the exact oracles.
//!
//! Probabilities can be carried as `f32`, `f64`, or as exact rationals
//! ([`BigRational`]). Everything that only needs field arithmetic and an
//! ordering is written against [`Scalar`]; statistics that need `sqrt`, `ln`
//! and friends are written against [`Real`].

use std::fmt::Debug;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Float, FromPrimitive, Num, Signed, ToPrimitive, Zero};

/// Field-like scalar with an ordering and lossy conversion to `f64`.
pub trait Scalar:
    Clone + Debug + PartialOrd + Num + Signed + FromPrimitive + ToPrimitive + Send + Sync + 'static
{
    /// Absolute tolerance used for normalization checks. Zero for exact types.
    fn tolerance() -> Self;

    /// Lossy conversion used on the sampling hot path.
    fn as_f64(&self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Conversion from `f64`; exact for rationals (binary expansion of the float).
    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).expect("finite value")
    }

    /// `|a - b| <= tolerance`.
    fn approx_eq(a: &Self, b: &Self) -> bool {
        (a.clone() - b.clone()).abs() <= Self::tolerance()
    }
}

/// Floating-point scalar for estimators.
pub trait Real: Scalar + Float {}

impl Scalar for f64 {
    fn tolerance() -> Self {
        1e-12
    }
    fn as_f64(&self) -> f64 {
        *self
    }
    fn from_f64_lossy(x: f64) -> Self {
        x
    }
}

impl Scalar for f32 {
    fn tolerance() -> Self {
        1e-6
    }
    fn from_f64_lossy(x: f64) -> Self {
        x as f32
    }
}

impl Real for f64 {}
impl Real for f32 {}

impl Scalar for BigRational {
    fn tolerance() -> Self {
        BigRational::zero()
    }
}

/// Exact rational `num / den`.
pub fn ratio(num: i64, den: i64) -> BigRational {
    BigRational::new(BigInt::from(num), BigInt::from(den))
}

/// Convert a real slice into scalars.
pub fn from_f64_slice<S: Scalar>(xs: &[f64]) -> Vec<S> {
    xs.iter().map(|&x| S::from_f64_lossy(x)).collect()
}
