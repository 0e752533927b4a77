//! Reverse-mode automatic differentiation over dense arrays.
//!
//! A [`Tape`] records forward operations into a Wengert list; [`Tape::backward`]
//! replays it in reverse to accumulate gradients for every registered leaf.
//! Tensors without a tape attachment are plain immutable values and all ops on
//! them evaluate numerically without recording anything.
//!
//! The tape is per-computation: build it, run backward, drop it. Only
//! first-order gradients are supported.

mod grad_check;
mod ops;
mod tape;
mod tensor;


pub use grad_check::grad_check;
pub use tape::{GradMap, LeafId, Tape};
pub use tensor::Tensor;
