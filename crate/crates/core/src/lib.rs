//! Variational LoRA finetuning lab.
//!
//! Trains tiny frozen-base transformer classifiers with low-rank adapters
//! under AdamW or IVON, samples the learned Gaussian posterior, ensembles
//! predictions and measures calibration.

pub mod error;
pub mod harness;
pub mod model;
pub mod metrics;
pub mod optim;
pub mod predict;
pub mod rng;
pub mod tensor;
