//! Dense tensors, a reverse-mode differentiation tape, and a
//! finite-difference reference.

mod graph;
mod gradcheck;
pub(crate) mod kernels;
mod tensor;

pub use graph::{Gradients, Graph, OpKind, Var};
pub use gradcheck::{finite_difference_grad, max_relative_error};
pub use tensor::Tensor;
