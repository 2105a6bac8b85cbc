//! Floating-point scalar abstraction used by all geometry in this crate.

use num_traits::{FloatConst, FromPrimitive, ToPrimitive};

/// Scalar type for points, transforms and scores: `f32` or `f64`.
///
/// Combines the nalgebra field operations needed for matrix math with the
/// num-traits conversions needed for binning and I/O.
pub trait Scalar:
    Copy + Default + FromPrimitive + ToPrimitive + FloatConst + nalgebra::RealField
{
    /// Conversion from an `f64` constant. Lossy for `f32`.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite constant")
    }

    /// Conversion from a count.
    fn of_usize(v: usize) -> Self {
        Self::from_usize(v).expect("count fits in scalar")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }

    fn finite(self) -> bool {
        self.as_f64().is_finite()
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
