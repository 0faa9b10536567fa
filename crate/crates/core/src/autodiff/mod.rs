//! Reverse-mode automatic differentiation over dense `f64` tensors.

mod graph;
pub(crate) mod kernels;

pub use graph::{backward, finite_diff_check, forward, Gradients, Graph, NodeId, Op};
