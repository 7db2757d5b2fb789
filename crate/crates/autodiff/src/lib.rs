//! Dense `f64` tensors and a minimal reverse-mode automatic differentiation tape.
//!
//! Layouts are channels-last throughout: images are `[B, H, W, C]`, sequences
//! `[N, T, ..., C]`. Only same-shape elementwise ops and scalar-with-tensor
//! scaling are supported; there is no general broadcasting.

pub mod checkpoint;
mod error;
#[cfg(any(test, feature = "gradcheck"))]
pub mod gradcheck;
mod graph;
mod kernels;
mod params;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Graph, Unary, Var};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
