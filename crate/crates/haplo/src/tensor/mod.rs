//! Reverse-mode autodiff over dense N-dimensional arrays.
//!
//! [`Tensor`] is a cheaply clonable handle to shape + data + optional
//! gradient accumulator. Operations are methods on `Tensor` taking a
//! [`Tape`]; when the tape is enabled and an input requires gradients the
//! op records a backward closure. [`Tape::backward`] replays the records
//! in reverse and accumulates gradients into every reachable leaf.
//!
//! The engine is generic over the element type: `f64` for the gradient
//! check suites, `f32` for training runs.

mod core;
pub mod gradcheck;
mod nn;
mod ops;
mod tape;


pub use core::{Element, Tensor};
pub use nn::IGNORE_INDEX;
pub use tape::Tape;
