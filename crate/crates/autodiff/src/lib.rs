//! Minimal reverse-mode automatic differentiation over dense row-major
//! tensors.
//!
//! A [`Graph`] is an eager tape: ops compute values immediately and record
//! what the backward pass needs. [`Graph::backward`] walks the tape in reverse
//! and returns [`Grads`] keyed by [`Var`]. Gradient flow is cut with
//! [`Graph::stop_gradient`] or by registering inputs via [`Graph::constant`].
//!
//! Elements are `f32` for training and `f64` for [`gradcheck`].

mod error;
mod gradcheck;
mod graph;
mod nn;
mod real;
mod tensor;

pub use error::{AdError, Result};
pub use gradcheck::gradcheck;
pub use graph::{Grads, Graph, Var};
pub use real::Real;
pub use tensor::Tensor;
