//! Minimal reverse-mode automatic differentiation over dense tensors.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::finite_diff_gradcheck;
pub(crate) use tape::softplus;
pub use tape::{Gradients, OpKind, Tape, Var};
pub use tensor::Tensor;
