//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is a single-use tape: build the forward computation through
//! its operation methods, call [`Graph::backward`] on a scalar loss, then
//! read adjoints for the leaves you tracked. Values evaluate eagerly so the
//! same graph type doubles as a plain forward executor (`Graph::inference`).
//!
//! The operation set is deliberately small: dense matmuls (via
//! `matrixmultiply`), the usual pointwise functions, masked row softmax,
//! embedding gather and layer normalization; enough for causal-attention
//! models at desk scale in either `f32` or `f64`.

mod fd;
mod graph;
mod ops;
mod scalar;
mod tensor;

pub use fd::{central_diff, max_rel_err, rel_err};
pub use graph::{Gradients, Graph, Var};
pub use scalar::{mm_nn, mm_nt, mm_tn, Scalar};
pub use tensor::Tensor;
