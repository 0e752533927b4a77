//! Reward-guided negative-embedding learning for classifier-free-guided
//! diffusion, built on a small tape-based autodiff engine and synthetic
//! Gaussian-mixture worlds where every quantity is checkable.

pub mod autodiff;
pub mod diffusion;
pub mod error;
pub mod harness;
pub mod optim;
pub mod probe;
pub mod reward;
pub mod sampling;
pub mod scalar;
pub mod schedule;
pub mod trainer;
pub mod util;

pub use error::{Error, Result, TensorError};

/// Default 64-bit tensor used by the model, trainer, and experiments.
pub type Tensor = autodiff::Tensor<f64>;
/// Default 64-bit tape.
pub type Tape = autodiff::Tape<f64>;
/// 32-bit variants, available for lower-precision experimentation.
pub type Tensor32 = autodiff::Tensor<f32>;
pub type Tape32 = autodiff::Tape<f32>;
