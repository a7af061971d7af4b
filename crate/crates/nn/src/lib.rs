//! Minimal dense-tensor engine with reverse-mode differentiation.
//!
//! Provides exactly what a small VGG/FPN detector needs: 2D convolution,
//! max pooling, channel concatenation, nearest upsampling, pointwise
//! activations and a hook for losses with closed-form gradients. All
//! tensors are NCHW and all kernels are deterministic.

pub mod check;
pub mod error;
pub mod gemm;
pub mod graph;
pub mod optim;
pub mod params;
pub mod real;
pub mod tensor;

pub use error::{NnError, Result};
pub use graph::{Gradients, Graph, NodeId, Padding};
pub use optim::{Adam, AdamConfig};
pub use params::{he_normal, ParamId, ParamStore, Parameter};
pub use real::Real;
pub use tensor::Tensor;

/// Logistic function, stable for large |x|.
pub fn sigmoid<T: Real>(x: T) -> T {
    graph::sigmoid(x)
}
