//! Experiment orchestration: configuration, resumable runs, results and
//! reports.

mod config;
mod report;
mod run;

use std::path::PathBuf;

pub use config::{AugmentPreset, ExperimentConfig, Protocol, OUTPUT_DIR_ENV};
pub use report::{
    emit_report, is_ood_condition, points_from_results, spearman, trend_summary, FigureEntry,
    ReportOptions, ReportSummary, TrendSummary,
};
pub use run::{
    eval_runs, plan_runs, read_results_csv, run_experiment, train_runs, write_results_csv,
    EvalContext, ExperimentOutcome, PlannedRun, ResultRow, RunManifest, RunStage,
};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error(
        "output directory {path} holds a run with config hash {found}, but the current config hashes to {expected}; \
         use a fresh output directory or restore the original config"
    )]
    ConfigMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("run {0} has no checkpoint; train it first")]
    NotTrained(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Train(#[from] crate::ssl::TrainError),
    #[error(transparent)]
    Eval(#[from] crate::eval::EvalError),
    #[error(transparent)]
    Scaling(#[from] crate::scaling::ScalingError),
    #[error(transparent)]
    Stream(#[from] crate::stream::StreamError),
    #[error(transparent)]
    World(#[from] crate::world::WorldError),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> ExperimentError {
    let path = path.into();
    move |source| ExperimentError::Io { path, source }
}
