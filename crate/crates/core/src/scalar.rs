//! Floating-point scalar abstraction shared by the numerical modules.

use num_traits::{Float, FromPrimitive, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Real scalar usable by the generator, semigroup and eigensolver code.
///
/// Implemented for `f32` and `f64`. Coefficient expressions are always
/// evaluated in `f64` and converted once when tables are sampled.
pub trait Scalar: Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Send + Sync + 'static {
    /// Lossy conversion from `f64`.
    fn of(x: f64) -> Self;

    /// Lossy conversion to `f64`.
    fn to_f64_lossy(self) -> f64;

    fn half() -> Self {
        Self::of(0.5)
    }

    fn two() -> Self {
        Self::of(2.0)
    }
}

impl Scalar for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn to_f64_lossy(self) -> f64 {
        self
    }
}

/// Largest absolute value, or zero for an empty slice.
pub fn sup_norm<T: Scalar>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |m, x| m.max(x.abs()))
}

/// `(min, max)` of a non-empty slice.
pub(crate) fn min_max<T: Scalar>(v: &[T]) -> (T, T) {
    v.iter().fold((T::infinity(), T::neg_infinity()), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}
