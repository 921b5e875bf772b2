//! Scalar abstraction so the whole stack can run in f32 or f64.
//!
//! The training pipeline defaults to `f32` (see [`Scalar`]); numeric
//! verification code instantiates everything with `f64`, where central
//! differences are actually trustworthy.

use num_traits::Float;

/// Floating-point scalar the tensor engine is generic over.
///
/// This is [`num_traits::Float`] plus infallible conversions to and from
/// `f64`, which reductions use internally as their accumulator type.
pub trait Real: Float + std::fmt::Debug + std::fmt::Display + 'static {
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Scalar type used by the command-line pipeline.
#[cfg(not(feature = "f64"))]
pub type Scalar = f32;

/// Scalar type used by the command-line pipeline.
#[cfg(feature = "f64")]
pub type Scalar = f64;
