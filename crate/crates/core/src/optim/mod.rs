//! AdamW and IVON behind one optimizer interface.
//!
//! A training step is `draw` (IVON samples θ from its posterior; AdamW has
//! nothing to draw), one `accumulate` per gradient evaluated at that point,
//! then `apply`. Harness code never branches on which optimizer it holds.

mod adamw;
mod ivon;

pub use adamw::{AdamW, AdamWHyper};
pub use ivon::{kl_to_prior, GaussianPosterior, IvonHyper};

use serde::{Deserialize, Serialize};

use crate::error::OptimError;
use crate::rng::StreamRng;

/// Linear decay to zero: `base · (1 − t/T)`.
pub fn lr_schedule(step: u64, total: u64, base: f64) -> Result<f64, OptimError> {
    if step > total {
        return Err(OptimError::ScheduleOverrun { step, total });
    }
    Ok(base * (1.0 - step as f64 / total as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adamw,
    Ivon,
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adamw => "adamw",
            OptimizerKind::Ivon => "ivon",
        })
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "adamw" => Ok(OptimizerKind::Adamw),
            "ivon" => Ok(OptimizerKind::Ivon),
            other => Err(format!("unknown optimizer {other:?} (expected adamw or ivon)")),
        }
    }
}

/// Immutable copy of what an optimizer knows about the parameters, handed to
/// evaluation workers.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorSnapshot {
    pub mean: Vec<f64>,
    /// Per-parameter variance; `None` for point estimates.
    pub variance: Option<Vec<f64>>,
}

impl PosteriorSnapshot {
    pub fn point(params: Vec<f64>) -> Self {
        Self {
            mean: params,
            variance: None,
        }
    }

    /// `m + sqrt(tau·v)·ε`; `tau == 0` (or a point estimate) returns `m` exactly.
    pub fn sample(&self, tau: f64, rng: &mut StreamRng) -> Result<Vec<f64>, OptimError> {
        if tau < 0.0 || tau.is_nan() {
            return Err(OptimError::NegativeTau(tau));
        }
        match &self.variance {
            Some(v) if tau > 0.0 => Ok(ivon::sample_gaussian(&self.mean, v, tau, rng)),
            _ => Ok(self.mean.clone()),
        }
    }
}

pub trait Optimizer: Send {
    fn kind(&self) -> OptimizerKind;

    fn num_params(&self) -> usize;

    /// Gradient evaluations per step.
    fn mc_samples(&self) -> usize {
        1
    }

    /// Point at which the next gradient must be evaluated, if it differs
    /// from [`Optimizer::params`].
    fn draw(&mut self, rng: &mut StreamRng) -> Option<&[f64]>;

    /// Records a gradient evaluated at the most recent draw.
    fn accumulate(&mut self, grad: &[f64]) -> Result<(), OptimError>;

    /// Applies the update from all accumulated gradients.
    fn apply(&mut self) -> Result<(), OptimError>;

    fn step(&mut self, grad: &[f64]) -> Result<(), OptimError> {
        self.accumulate(grad)?;
        self.apply()
    }

    /// Point estimate: the parameters for AdamW, the posterior mean for IVON.
    fn params(&self) -> &[f64];

    fn snapshot(&self) -> PosteriorSnapshot;

    fn step_count(&self) -> u64;

    /// Learning rate that the next `apply` will use.
    fn current_lr(&self) -> f64;
}

/// Serialized optimizer: scalar state as JSON, arrays as `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerExport {
    pub kind: OptimizerKind,
    pub meta: serde_json::Value,
    pub arrays: Vec<(String, Vec<f64>)>,
}

/// The configured optimizer.
#[derive(Clone, Debug)]
pub enum AnyOptimizer {
    Adamw(AdamW),
    Ivon(GaussianPosterior),
}

impl AnyOptimizer {
    pub fn export(&self) -> OptimizerExport {
        match self {
            AnyOptimizer::Adamw(o) => o.export(),
            AnyOptimizer::Ivon(o) => o.export(),
        }
    }

    pub fn import(export: &OptimizerExport) -> Result<Self, OptimError> {
        Ok(match export.kind {
            OptimizerKind::Adamw => AnyOptimizer::Adamw(AdamW::import(export)?),
            OptimizerKind::Ivon => AnyOptimizer::Ivon(GaussianPosterior::import(export)?),
        })
    }

    fn inner(&self) -> &dyn Optimizer {
        match self {
            AnyOptimizer::Adamw(o) => o,
            AnyOptimizer::Ivon(o) => o,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn Optimizer {
        match self {
            AnyOptimizer::Adamw(o) => o,
            AnyOptimizer::Ivon(o) => o,
        }
    }
}

impl Optimizer for AnyOptimizer {
    fn kind(&self) -> OptimizerKind {
        self.inner().kind()
    }
    fn num_params(&self) -> usize {
        self.inner().num_params()
    }
    fn mc_samples(&self) -> usize {
        self.inner().mc_samples()
    }
    fn draw(&mut self, rng: &mut StreamRng) -> Option<&[f64]> {
        self.inner_mut().draw(rng)
    }
    fn accumulate(&mut self, grad: &[f64]) -> Result<(), OptimError> {
        self.inner_mut().accumulate(grad)
    }
    fn apply(&mut self) -> Result<(), OptimError> {
        self.inner_mut().apply()
    }
    fn params(&self) -> &[f64] {
        self.inner().params()
    }
    fn snapshot(&self) -> PosteriorSnapshot {
        self.inner().snapshot()
    }
    fn step_count(&self) -> u64 {
        self.inner().step_count()
    }
    fn current_lr(&self) -> f64 {
        self.inner().current_lr()
    }
}

pub(crate) fn meta_f64(meta: &serde_json::Value, key: &str) -> Result<f64, OptimError> {
    meta.get(key)
        .and_then(|v| v.as_f64())
        .ok_or_else(|| OptimError::Hyper(format!("missing {key} in optimizer state")))
}

pub(crate) fn take_array(export: &OptimizerExport, name: &str, len: usize) -> Result<Vec<f64>, OptimError> {
    let arr = export
        .arrays
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, a)| a.clone())
        .ok_or_else(|| OptimError::Hyper(format!("missing array {name} in optimizer state")))?;
    if arr.len() != len {
        return Err(OptimError::GradLength {
            expected: len,
            got: arr.len(),
        });
    }
    Ok(arr)
}
