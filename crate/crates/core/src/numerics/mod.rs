//! Dense-tensor core: reverse-mode autodiff, forward primitives, an AdamW
//! optimizer with warmup/decay scheduling, and a finite-difference oracle.
//!
//! Storage is row-major with explicit shapes. There is no implicit
//! broadcasting beyond bias-add, which keeps every backward rule auditable
//! in one place (`tensor::Op`). Single-threaded by contract.

pub mod gradcheck;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_params};
pub use optim::{AdamW, LrSchedule, OptimConfig};
pub use rng::SeedRng;
pub use scalar::Scalar;
pub use tensor::{NumericsError, Tensor};

/// Fill constant used by `masked_fill` before softmax. Finite (not -inf) so
/// masked rows never produce NaN in the backward pass.
pub const MASK_FILL: f64 = -1e9;
