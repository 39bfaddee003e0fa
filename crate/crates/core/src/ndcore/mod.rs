//! Tensors, RNG and reverse-mode autodiff.

mod float;
mod rng;
mod tape;
mod tensor;

pub use float::{DType, Float};
pub use rng::Rng;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
