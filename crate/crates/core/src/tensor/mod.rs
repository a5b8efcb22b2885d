//! Reverse-mode automatic differentiation, optimizers and checkpoints.

mod array;
pub mod checkpoint;
mod error;
pub mod gradcheck;
pub mod kernels;
pub mod optim;
mod scalar;
mod tape;

pub use array::{ParamId, ParamStore, Tensor};
pub use checkpoint::TensorArchive;
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, Differentiable, GradCheckConfig, GradCheckReport};
pub use optim::{
    clip_global_grad_norm, ema_update, OptimizerConfig, OptimizerKind, OptimizerState, StepReport,
};
pub use scalar::Scalar;
pub use tape::{BackwardReport, OpKind, Tape, Target, Var};
