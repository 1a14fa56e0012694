//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The engine is deliberately small: a [`Graph`] records eagerly evaluated
//! ops, [`Graph::backward`] returns gradients for parameters held in a
//! [`ParamStore`] and for explicit input leaves. Everything runs on one
//! thread in a fixed order, so identical inputs give bit-identical results.

pub mod check;
mod graph;
mod kernels;
mod optim;
mod params;
mod tensor;

pub use graph::{sigmoid, Gradients, Graph, Var};
pub use optim::Adam;
pub use params::{ParamEntry, ParamId, ParamStore};
pub use tensor::{broadcast_shape, numel, Tensor};
