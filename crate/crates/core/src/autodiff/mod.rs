//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.

mod kernels;
mod sgd;
mod tape;
mod tensor;

pub use kernels::{dot, softmax_into};
pub use sgd::{sgd_step, SgdConfig};
pub use tape::{Gradients, Tape, Var, PROB_FLOOR};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
