//! Multi-view molecule-text alignment at desk scale.
//!
//! The pipeline aligns two structural views of a molecule (a 2D graph view
//! and an SE(3)-invariant 3D view) with free-text descriptions through a
//! multi-querying transformer (MQ-Former), then soft-prompts a small causal
//! decoder for caption generation. Everything is built on a minimal
//! reverse-mode autodiff core that is generic over the scalar type:
//! training runs in `f32`, gradient checking in `f64`.

pub mod numerics;

pub use numerics::scalar::Scalar;
pub use numerics::tensor::Tensor;

/// Training-precision tensor (checkpoints store this width).
pub type Tensor32 = Tensor<f32>;
/// Gradient-check precision tensor.
pub type Tensor64 = Tensor<f64>;
