//! Reverse-mode automatic differentiation.

pub mod gradcheck;
mod graph;
pub mod kernels;

pub use graph::{Gradients, Graph, Var, LOG_FLOOR};
