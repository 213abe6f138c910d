//! Floating-point scalar abstraction: f32 or f64.

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};

/// Scalar type the numeric core is generic over.
///
/// `bits` exposes the raw IEEE representation so freeze masks and
/// checkpoint round-trips can be checked for byte-exact equality; `of` /
/// `as_f64` are the infallible casts the cast-heavy numeric code uses.
pub trait Scalar:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: &'static str;

    fn bits(self) -> u64;
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";

    fn bits(self) -> u64 {
        self.to_bits() as u64
    }

    fn of(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";

    fn bits(self) -> u64 {
        self.to_bits()
    }

    fn of(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }
}
