//! Dense `f64` tensors with reverse-mode automatic differentiation.

pub mod gradcheck;
pub mod io;
mod tape;
mod tensor;

pub use gradcheck::{check_gradients, finite_diff_grad, op_names, op_suite, relative_error, OpReport};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
