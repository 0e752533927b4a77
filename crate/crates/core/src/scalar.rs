//! Scalar abstraction for the numeric core.
//!
//! All tensor math is generic over [`Scalar`]; the rest of the crate works
//! with the `f64` aliases exported from the crate root.

use num_traits::{Float, FromPrimitive, NumAssign};

/// Floating-point scalar usable by the tensor/tape engine.
pub trait Scalar:
    Float + FromPrimitive + NumAssign + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    /// Shorthand for lossy conversion from `f64` literals.
    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("f64 constant must convert")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
