//! Dense tensors, reverse-mode differentiation, and the finite-difference
//! oracle everything downstream is validated against.

pub mod gradcheck;
pub mod graph;
pub mod tensor;

pub use gradcheck::{default_eps, grad_check};
pub use graph::{Graph, TensorId};
pub use tensor::Tensor;
