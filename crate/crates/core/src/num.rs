//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point element type: `f32` or `f64`.
///
/// Reductions always accumulate in `f64` regardless of the storage type, so
/// the storage precision only affects what is written back.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Lossy conversion from an `f64` accumulator.
    fn of(x: f64) -> Self;

    /// Widening conversion into the accumulator type.
    fn wide(self) -> f64;

    fn from_f32_lossy(x: f32) -> Self {
        Self::of(x as f64)
    }

    fn to_f32_lossy(self) -> f32 {
        self.wide() as f32
    }
}

impl Scalar for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn wide(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }

    #[inline]
    fn wide(self) -> f64 {
        self
    }
}

/// Round half away from zero for nonnegative inputs (`round(2.5) == 3`).
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding_is_half_up() {
        assert_eq!(round_half_up(2.5), 3);
        assert_eq!(round_half_up(2.49), 2);
        assert_eq!(round_half_up(176.4), 176);
        assert_eq!(round_half_up(0.0), 0);
    }

    #[test]
    fn conversions_round_trip_f64() {
        assert_eq!(<f64 as Scalar>::of(0.1).wide(), 0.1);
        assert_eq!(<f32 as Scalar>::of(0.5).wide(), 0.5);
    }
}
