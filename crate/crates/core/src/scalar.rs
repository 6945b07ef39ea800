//! Scalar abstraction shared by the geometry primitives.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating point scalar usable by the geometry layer (`f32` or `f64`).
pub trait Real: RealField + Copy + FromPrimitive + ToPrimitive {
    /// Converts an `f64` literal into `Self`.
    #[inline]
    fn lit(value: f64) -> Self {
        nalgebra::convert(value)
    }

    /// Lossy conversion back to `f64`, used for reporting.
    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Tolerance below which a quantity is treated as numerically zero.
    fn small() -> Self;
}

impl Real for f32 {
    fn small() -> Self {
        1e-6
    }
}

impl Real for f64 {
    fn small() -> Self {
        1e-12
    }
}
