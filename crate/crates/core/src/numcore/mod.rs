//! Dense tensors, reverse-mode differentiation and the shared layer primitives.

pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use tensor::{ParamSet, Tensor};
