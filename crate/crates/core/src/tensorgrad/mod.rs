//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Graph`] records every operation as it is evaluated. Calling
//! [`Graph::backward`] on a scalar node sweeps the record in reverse and
//! returns the gradient of that scalar with respect to every leaf created with
//! `requires_grad = true`.
//!
//! The op set is closed: elementwise arithmetic and activations, axis
//! reductions, layout helpers, 2-D convolution and bilinear affine warps.

mod conv;
mod graph;
mod tensor;
mod warp;

pub use graph::{BinaryKind, Gradients, Graph, ReduceKind, UnaryKind, Var, SQRT_GRAD_EPS};
pub(crate) use graph::sigmoid;
pub use tensor::{Result, Tensor, TensorError};
pub use warp::{exact_coverage, Affine2, WarpPlan};
