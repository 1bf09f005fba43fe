//! Experiment pipeline: synthetic data, base pretraining, adapter
//! finetuning under either optimizer, evaluation, τ sweeps, timing and
//! checkpoints.

pub mod checkpoint;
pub mod config;
mod pipeline;
pub mod report;
pub mod task;
pub mod timing;

use std::path::PathBuf;

use thiserror::Error;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use config::{EvalMode, ExperimentConfig, Precision};
pub use pipeline::*;
pub use report::{aggregate, format_table, SummaryRow};
pub use task::{generate_finetune, generate_pretrain, generate_task, Split, TaskSpec};
pub use timing::{profile_timing, PhaseStats, TimingReport};

use crate::error::{MetricsError, ModelError, OptimError, PredictError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{0}")]
    Config(String),
    #[error("reading {0}: {1}")]
    Io(PathBuf, #[source] std::io::Error),
    #[error("base checkpoint {0} does not exist; run `pretrain` first")]
    MissingBase(PathBuf),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Predict(#[from] PredictError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("non-finite loss {loss} at step {step} (lr {lr:.3e}, max |grad| {max_grad:.3e})")]
    NonFinite {
        step: u64,
        loss: f64,
        lr: f64,
        max_grad: f64,
    },
    #[error("checkpoint was written by a different config (hash {found}, expected {expected})")]
    ConfigMismatch { found: String, expected: String },
    #[error("tau sweep needs an IVON run; this run used {0}")]
    NotIvon(crate::optim::OptimizerKind),
}
