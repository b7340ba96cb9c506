//! Reverse-mode automatic differentiation over dense `f64` tensors.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_many};
pub use tape::{Tape, Var};
pub(crate) use tape::sigmoid;
pub use tensor::Tensor;
