//! Evaluation protocols on frozen or finetuned representations, the
//! parametric distortion battery and accuracy metrics.

mod distort;
mod finetune;
mod labeled;
mod metrics;
mod ood;
mod probe;
mod record;

use thiserror::Error;

use crate::ssl::TrainError;
use crate::tensor::TensorError;

pub use distort::{
    adjust_contrast, amplitude_spectrum, apply_distortion, false_color, high_pass, low_pass,
    mean_amplitude, phase_scramble, power_equalize, rotate, uniform_noise, DistortionContext,
    DistortionKind, DistortionSpec, Spectrum,
};
pub use finetune::{
    evaluate, few_shot_finetune, finetune_network, practice_finetune, FinetuneConfig,
    PracticeOutcome,
};
pub use labeled::{labeled_from_world, LabeledSet, FEW_SHOT_PER_CLASS};
pub use metrics::{top1_top5, topk_accuracy};
pub use ood::{
    ood_eval, ConditionAccuracy, OodReport, OodSuite, FULL_SCALE_CATEGORIES, PRACTICE_TRIALS,
};
pub use probe::{linear_probe, linear_probe_embeddings, ProbeConfig, ProbeResult};
pub use record::{read_eval_csv, write_eval_csv, EvalRecord};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("k = {k} outside [1, {classes}]")]
    KOutOfRange { k: usize, classes: usize },
    #[error("label {label} outside vocabulary of {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("head has {head} outputs but the vocabulary has {vocab} classes")]
    ClassCountMismatch { head: usize, vocab: usize },
    #[error("class {0} has too few examples")]
    MissingClass(usize),
    #[error("training set has a single class")]
    SingleClass,
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error("distortion {kind}: parameter {param} outside its domain")]
    BadParameter { kind: &'static str, param: f64 },
    #[error("{0}")]
    Invalid(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;
