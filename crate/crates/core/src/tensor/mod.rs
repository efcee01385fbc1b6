//! Dense tensors and reverse-mode automatic differentiation.

mod fd;
mod graph;
pub mod kernels;
mod param;
mod scalar;
mod storage;

pub use fd::{finite_difference_grad, max_relative_error, RELATIVE_ERROR_FLOOR};
pub use graph::{checked_mode, set_checked_mode, Graph, Var};
pub use param::{zero_grad, Param};
pub use scalar::{DType, Scalar};
pub use storage::{strides, Tensor};
