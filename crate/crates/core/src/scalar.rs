//! Scalar abstraction shared by every numerical routine in the crate.

use nalgebra::RealField;

/// Real scalar usable throughout the library.
///
/// Implemented for `f32` and `f64`. Everything statistical is written against
/// this trait; the crate root exposes `f64` aliases for the common case.
pub trait Real: RealField + Copy + Send + Sync + 'static {}

impl<T> Real for T where T: RealField + Copy + Send + Sync + 'static {}

/// Converts an `f64` literal into `T`.
#[inline]
pub fn real<T: Real>(x: f64) -> T {
    nalgebra::convert(x)
}

/// Converts a count into `T`.
#[inline]
pub fn count<T: Real>(n: usize) -> T {
    nalgebra::convert(n as f64)
}

/// Lossy conversion back to `f64` for reporting.
#[inline]
pub fn to_f64<T: Real>(x: T) -> f64 {
    nalgebra::try_convert(x).unwrap_or(f64::NAN)
}
