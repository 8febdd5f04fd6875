//! Minimal reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! walks it once in reverse. Parameters live outside the tape as [`Tensor`]s
//! and are copied in as leaves, so a tape is a throwaway per training step.

mod adam;
mod conv;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use conv::Conv2dSpec;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
