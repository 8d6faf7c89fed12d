//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.

pub mod ops;
mod optim;
mod tape;
mod tensor;

pub use optim::Adam;
pub use tape::{Gradients, Op, Tape, Var};
pub use tensor::Tensor;
