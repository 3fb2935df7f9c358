//! Dense `f64` tensors and a dynamic, taped reverse-mode autodiff graph.
//!
//! A [`Graph`] is built fresh for each forward pass. Leaves are registered
//! with [`Graph::input`] (no gradient) or [`Graph::param`] (gradient tracked),
//! ops append nodes, and [`Graph::backward`] sweeps the tape in reverse.
//! Graphs are single-threaded; plain [`Tensor`] values are `Send + Sync`.

mod error;
pub mod gradcheck;
mod graph;
pub mod kernels;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Activation, BatchNormMode, Graph, RunningStats, Var};
pub use tensor::Tensor;
