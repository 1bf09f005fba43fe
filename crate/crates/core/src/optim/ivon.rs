//! IVON: a diagonal Gaussian posterior `N(m, diag(v))` trained by a
//! natural-gradient update whose scale vector `h` sets both the step size
//! and the posterior variance `v = 1 / (λ (h + δ))`.

use serde::{Deserialize, Serialize};

use super::{lr_schedule, meta_f64, take_array, Optimizer, OptimizerExport, OptimizerKind, PosteriorSnapshot};
use crate::error::OptimError;
use crate::rng::StreamRng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IvonHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Effective sample size λ.
    pub ess: f64,
    /// Prior coupling δ; the prior variance is `1 / (λ δ)`.
    pub weight_decay: f64,
    pub h0: f64,
    pub clip_radius: f64,
    pub total_steps: u64,
    pub mc_samples: usize,
}

impl Default for IvonHyper {
    fn default() -> Self {
        Self {
            lr: 0.03,
            beta1: 0.9,
            beta2: 1.0 - 1e-5,
            ess: 1e7,
            weight_decay: 1e-4,
            h0: 3e-4,
            clip_radius: 1e-3,
            total_steps: 10_000,
            mc_samples: 1,
        }
    }
}

impl IvonHyper {
    pub fn validate(&self) -> Result<(), OptimError> {
        let bad = |m: &str| Err(OptimError::Hyper(m.to_string()));
        if !(self.lr > 0.0) {
            return bad("ivon lr must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return bad("beta1 must be in [0, 1)");
        }
        if !(self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad("beta2 must be in (0, 1)");
        }
        if !(self.ess > 0.0) {
            return bad("ess must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be nonnegative");
        }
        if !(self.h0 > 0.0) || !(self.h0 + self.weight_decay > 0.0) {
            return bad("h0 must be positive");
        }
        if !(self.clip_radius > 0.0) {
            return bad("clip_radius must be positive");
        }
        if self.total_steps == 0 {
            return bad("total_steps must be positive");
        }
        if self.mc_samples == 0 {
            return bad("mc_samples must be at least 1");
        }
        Ok(())
    }

    /// `1 / (λ δ)`; `None` when δ = 0 (improper flat prior).
    pub fn prior_variance(&self) -> Option<f64> {
        (self.weight_decay > 0.0).then(|| 1.0 / (self.ess * self.weight_decay))
    }
}

pub(crate) fn sample_gaussian(mean: &[f64], var: &[f64], tau: f64, rng: &mut StreamRng) -> Vec<f64> {
    mean.iter()
        .zip(var)
        .map(|(&m, &v)| m + (tau * v).sqrt() * rng.normal())
        .collect()
}

/// `KL(N(m, diag v) ‖ N(0, v0 I))`.
pub fn kl_to_prior(mean: &[f64], var: &[f64], v0: f64) -> Result<f64, OptimError> {
    if !(v0 > 0.0) {
        return Err(OptimError::PriorVariance(v0));
    }
    Ok(0.5
        * mean
            .iter()
            .zip(var)
            .map(|(&m, &v)| (v + m * m) / v0 - 1.0 - (v / v0).ln())
            .sum::<f64>())
}

#[derive(Clone, Debug)]
pub struct GaussianPosterior {
    pub hyper: IvonHyper,
    mean: Vec<f64>,
    hess: Vec<f64>,
    momentum: Vec<f64>,
    step: u64,
    sample: Option<Vec<f64>>,
    grad_acc: Vec<f64>,
    hess_acc: Vec<f64>,
    pending: usize,
}

impl GaussianPosterior {
    pub fn new(mean: Vec<f64>, hyper: IvonHyper) -> Result<Self, OptimError> {
        hyper.validate()?;
        let n = mean.len();
        Ok(Self {
            hess: vec![hyper.h0; n],
            momentum: vec![0.0; n],
            mean,
            hyper,
            step: 0,
            sample: None,
            grad_acc: vec![0.0; n],
            hess_acc: vec![0.0; n],
            pending: 0,
        })
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn hessian(&self) -> &[f64] {
        &self.hess
    }

    pub fn momentum(&self) -> &[f64] {
        &self.momentum
    }

    /// `v_i = 1 / (λ (h_i + δ))`
    pub fn variance(&self) -> Vec<f64> {
        let (lam, delta) = (self.hyper.ess, self.hyper.weight_decay);
        self.hess.iter().map(|&h| 1.0 / (lam * (h + delta))).collect()
    }

    /// `θ = m + sqrt(τ v) ε`. `τ = 0` returns `m` bitwise.
    pub fn sample(&self, tau: f64, rng: &mut StreamRng) -> Result<Vec<f64>, OptimError> {
        if tau < 0.0 || tau.is_nan() {
            return Err(OptimError::NegativeTau(tau));
        }
        if tau == 0.0 {
            return Ok(self.mean.clone());
        }
        Ok(sample_gaussian(&self.mean, &self.variance(), tau, rng))
    }

    /// Reparameterization estimate of the diagonal Hessian,
    /// `ĥ_i = ĝ_i (θ_i − m_i) / v_i`, for `θ` drawn at τ = 1.
    pub fn hessian_estimate(&self, grad: &[f64], theta: &[f64]) -> Vec<f64> {
        let (lam, delta) = (self.hyper.ess, self.hyper.weight_decay);
        grad.iter()
            .zip(theta)
            .zip(self.mean.iter().zip(&self.hess))
            .map(|((&g, &t), (&m, &h))| g * (t - m) * lam * (h + delta))
            .collect()
    }

    /// One update from a gradient `grad` evaluated at the sample `theta`.
    pub fn step_with_sample(&mut self, grad: &[f64], theta: &[f64]) -> Result<(), OptimError> {
        self.sample = Some(theta.to_vec());
        self.accumulate(grad)?;
        self.apply()
    }

    /// Moves `(g, h, m)` given averaged gradient and Hessian estimates.
    fn update(&mut self, grad: &[f64], hess_est: &[f64]) -> Result<(), OptimError> {
        let h = &self.hyper;
        if self.step >= h.total_steps {
            return Err(OptimError::ScheduleOverrun {
                step: self.step + 1,
                total: h.total_steps,
            });
        }
        let lr = lr_schedule(self.step, h.total_steps, h.lr)?;
        let (b1, b2, delta, xi) = (h.beta1, h.beta2, h.weight_decay, h.clip_radius);
        let omb2 = 1.0 - b2;
        for i in 0..self.mean.len() {
            self.momentum[i] = b1 * self.momentum[i] + (1.0 - b1) * grad[i];
            let hi = self.hess[i];
            let d = hi - hess_est[i];
            let next = b2 * hi + omb2 * hess_est[i] + 0.5 * omb2 * omb2 * d * d / (hi + delta);
            if !(next + delta > 0.0) || !next.is_finite() {
                return Err(OptimError::Instability {
                    index: i,
                    value: next + delta,
                });
            }
            self.hess[i] = next;
        }
        self.step += 1;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        for i in 0..self.mean.len() {
            let gbar = self.momentum[i] / bc1;
            let dir = ((gbar + delta * self.mean[i]) / (self.hess[i] + delta)).clamp(-xi, xi);
            self.mean[i] -= lr * dir;
        }
        Ok(())
    }

    pub fn export(&self) -> OptimizerExport {
        OptimizerExport {
            kind: OptimizerKind::Ivon,
            meta: serde_json::json!({ "hyper": self.hyper, "step": self.step }),
            arrays: vec![
                ("m".into(), self.mean.clone()),
                ("h".into(), self.hess.clone()),
                ("g".into(), self.momentum.clone()),
            ],
        }
    }

    pub fn import(export: &OptimizerExport) -> Result<Self, OptimError> {
        let hyper: IvonHyper = serde_json::from_value(export.meta["hyper"].clone())
            .map_err(|e| OptimError::Hyper(e.to_string()))?;
        let step = meta_f64(&export.meta, "step")? as u64;
        let n = export.arrays.first().map(|(_, a)| a.len()).unwrap_or(0);
        let mut post = GaussianPosterior::new(take_array(export, "m", n)?, hyper)?;
        post.hess = take_array(export, "h", n)?;
        post.momentum = take_array(export, "g", n)?;
        post.step = step;
        Ok(post)
    }
}

impl Optimizer for GaussianPosterior {
    fn kind(&self) -> OptimizerKind {
        OptimizerKind::Ivon
    }

    fn num_params(&self) -> usize {
        self.mean.len()
    }

    fn mc_samples(&self) -> usize {
        self.hyper.mc_samples
    }

    fn draw(&mut self, rng: &mut StreamRng) -> Option<&[f64]> {
        let v = self.variance();
        self.sample = Some(sample_gaussian(&self.mean, &v, 1.0, rng));
        self.sample.as_deref()
    }

    fn accumulate(&mut self, grad: &[f64]) -> Result<(), OptimError> {
        if grad.len() != self.mean.len() {
            return Err(OptimError::GradLength {
                expected: self.mean.len(),
                got: grad.len(),
            });
        }
        let theta = self
            .sample
            .take()
            .ok_or_else(|| OptimError::Hyper("accumulate called without a posterior draw".into()))?;
        let hest = self.hessian_estimate(grad, &theta);
        for i in 0..grad.len() {
            self.grad_acc[i] += grad[i];
            self.hess_acc[i] += hest[i];
        }
        self.pending += 1;
        Ok(())
    }

    fn apply(&mut self) -> Result<(), OptimError> {
        if self.pending == 0 {
            return Ok(());
        }
        let inv = 1.0 / self.pending as f64;
        let grad: Vec<f64> = self.grad_acc.iter().map(|g| g * inv).collect();
        let hest: Vec<f64> = self.hess_acc.iter().map(|h| h * inv).collect();
        self.grad_acc.iter_mut().for_each(|x| *x = 0.0);
        self.hess_acc.iter_mut().for_each(|x| *x = 0.0);
        self.pending = 0;
        self.update(&grad, &hest)
    }

    fn params(&self) -> &[f64] {
        &self.mean
    }

    fn snapshot(&self) -> PosteriorSnapshot {
        PosteriorSnapshot {
            mean: self.mean.clone(),
            variance: Some(self.variance()),
        }
    }

    fn step_count(&self) -> u64 {
        self.step
    }

    fn current_lr(&self) -> f64 {
        lr_schedule(self.step.min(self.hyper.total_steps), self.hyper.total_steps, self.hyper.lr).unwrap_or(0.0)
    }
}
