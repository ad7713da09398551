//! Tape-based reverse-mode automatic differentiation over `f64` tensors.
//!
//! A [`Graph`] is rebuilt for every forward pass. Leaves are either
//! differentiable inputs or constants; [`Graph::backward`] returns the
//! gradient of a scalar node with respect to every differentiable leaf.

mod backward;
mod gradcheck;
mod graph;
mod kernels;
mod tensor;

pub use backward::Gradients;
pub use gradcheck::{grad_check, grad_check_many, op_grad_check, GradCheckReport};
pub use graph::{Graph, OpKind, Var};
pub use tensor::Tensor;
