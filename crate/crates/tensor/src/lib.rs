//! Dense `f64` tensors, a reverse-mode tape, named parameters, Adam, and a
//! finite-difference gradient oracle.

pub mod error;
pub mod gradcheck;
pub mod graph;
mod kernels;
pub mod nn;
pub mod optim;
pub mod param;
pub mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{finite_diff_check, relative_error, GradCheckConfig, GradCheckReport};
pub use graph::{BatchStats, Graph, Padding, Var};
pub use nn::{Init, LayerNorm, Linear, MultiHeadAttention, LAYER_NORM_EPS};
pub use optim::{Adam, AdamConfig, StepSchedule};
pub use param::{Gradients, ParamId, ParamKind, ParamStore, Parameter};
pub use tensor::{strides, Tensor};

/// Batch-norm epsilon used throughout.
pub const BATCH_NORM_EPS: f64 = 1e-5;
/// Running-statistics momentum.
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;
