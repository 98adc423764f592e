//! Dense tensors, shared kernels and reverse-mode autodiff.

pub mod graph;
pub mod kernels;
pub mod tensor;

pub use graph::{Gradients, Graph, ReduceKind, RoundMode, Var};
pub use tensor::Tensor;
