//! Self-supervised objectives: temporal episode classification and
//! self-distillation with an EMA teacher.

mod checkpoint;
mod dino;
mod network;
mod temporal;
mod train;

use thiserror::Error;

use crate::augment::AugmentError;
use crate::stream::StreamError;
use crate::tensor::TensorError;

pub use checkpoint::{config_hash, Checkpoint, SubsetDescriptor};
pub use dino::{
    dino_loss_value, dino_step, teacher_momentum, DinoBatch, DinoConfig, DinoState, DinoStepReport,
};
pub use network::{Architecture, BackboneSpec, HeadSpec, Network, StageSpec, FULL_SCALE_EMBED_DIM};
pub use temporal::{
    classification_loss, temporal_classification_step, StepOutcome, TemporalClassConfig,
};
pub use train::{
    embed, preprocess, render_training_data, train, write_trace_csv, Algorithm, EarlyStop,
    EpochMetrics, TrainConfig, TrainOutcome, TrainingData,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error("non-finite value at step {step} (lr {lr}, last grad norm {grad_norm:?}): {detail}")]
    NonFinite {
        step: u64,
        lr: f64,
        grad_norm: Option<f64>,
        detail: String,
    },
    #[error("training subset is empty")]
    EmptySubset,
    #[error("invalid config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
