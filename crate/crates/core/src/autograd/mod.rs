//! Reverse-mode automatic differentiation over a recorded tape.

pub mod kernels;
mod tape;

pub use tape::{Activation, Gradients, Tape, Var};
