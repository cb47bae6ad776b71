//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.

pub mod gradcheck;
mod tape;
mod tensor;

pub use tape::{attention_probs, log_sigmoid, sigmoid, softmax_in_place, NormScope, Tape, Var};
pub use tensor::Tensor;
