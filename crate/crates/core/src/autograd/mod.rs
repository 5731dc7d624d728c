//! Reverse-mode automatic differentiation over [`Tensor`](crate::Tensor)s.

mod graph;
pub mod kernels;

pub use graph::{Graph, Var};
