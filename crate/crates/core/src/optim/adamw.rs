use serde::{Deserialize, Serialize};

use super::{lr_schedule, meta_f64, take_array, Optimizer, OptimizerExport, OptimizerKind, PosteriorSnapshot};
use crate::error::OptimError;
use crate::rng::StreamRng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub total_steps: u64,
}

impl Default for AdamWHyper {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            total_steps: 10_000,
        }
    }
}

impl AdamWHyper {
    pub fn validate(&self) -> Result<(), OptimError> {
        let bad = |m: &str| Err(OptimError::Hyper(m.to_string()));
        if !(self.lr > 0.0) {
            return bad("adamw lr must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adamw betas must be in [0, 1)");
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 {
            return bad("adamw eps must be positive and weight_decay nonnegative");
        }
        if self.total_steps == 0 {
            return bad("total_steps must be positive");
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay, bias correction and linear lr decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub hyper: AdamWHyper,
    params: Vec<f64>,
    exp_avg: Vec<f64>,
    exp_avg_sq: Vec<f64>,
    step: u64,
    grad: Option<Vec<f64>>,
}

impl AdamW {
    pub fn new(params: Vec<f64>, hyper: AdamWHyper) -> Result<Self, OptimError> {
        hyper.validate()?;
        let n = params.len();
        Ok(Self {
            hyper,
            params,
            exp_avg: vec![0.0; n],
            exp_avg_sq: vec![0.0; n],
            step: 0,
            grad: None,
        })
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.exp_avg_sq
    }

    pub fn export(&self) -> OptimizerExport {
        OptimizerExport {
            kind: OptimizerKind::Adamw,
            meta: serde_json::json!({ "hyper": self.hyper, "step": self.step }),
            arrays: vec![
                ("params".into(), self.params.clone()),
                ("exp_avg".into(), self.exp_avg.clone()),
                ("exp_avg_sq".into(), self.exp_avg_sq.clone()),
            ],
        }
    }

    pub fn import(export: &OptimizerExport) -> Result<Self, OptimError> {
        let hyper: AdamWHyper = serde_json::from_value(export.meta["hyper"].clone())
            .map_err(|e| OptimError::Hyper(e.to_string()))?;
        let step = meta_f64(&export.meta, "step")? as u64;
        let n = export.arrays.first().map(|(_, a)| a.len()).unwrap_or(0);
        let mut o = AdamW::new(take_array(export, "params", n)?, hyper)?;
        o.exp_avg = take_array(export, "exp_avg", n)?;
        o.exp_avg_sq = take_array(export, "exp_avg_sq", n)?;
        o.step = step;
        Ok(o)
    }
}

impl Optimizer for AdamW {
    fn kind(&self) -> OptimizerKind {
        OptimizerKind::Adamw
    }

    fn num_params(&self) -> usize {
        self.params.len()
    }

    fn draw(&mut self, _rng: &mut StreamRng) -> Option<&[f64]> {
        None
    }

    fn accumulate(&mut self, grad: &[f64]) -> Result<(), OptimError> {
        if grad.len() != self.params.len() {
            return Err(OptimError::GradLength {
                expected: self.params.len(),
                got: grad.len(),
            });
        }
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(grad).for_each(|(a, g)| *a += g),
            None => self.grad = Some(grad.to_vec()),
        }
        Ok(())
    }

    fn apply(&mut self) -> Result<(), OptimError> {
        let Some(grad) = self.grad.take() else {
            return Ok(());
        };
        let h = &self.hyper;
        if self.step >= h.total_steps {
            return Err(OptimError::ScheduleOverrun {
                step: self.step + 1,
                total: h.total_steps,
            });
        }
        let lr = lr_schedule(self.step, h.total_steps, h.lr)?;
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - h.beta1.powi(t);
        let bc2 = 1.0 - h.beta2.powi(t);
        let decay = 1.0 - lr * h.weight_decay;
        for i in 0..self.params.len() {
            let g = grad[i];
            self.exp_avg[i] = h.beta1 * self.exp_avg[i] + (1.0 - h.beta1) * g;
            self.exp_avg_sq[i] = h.beta2 * self.exp_avg_sq[i] + (1.0 - h.beta2) * g * g;
            let m_hat = self.exp_avg[i] / bc1;
            let v_hat = self.exp_avg_sq[i] / bc2;
            self.params[i] = self.params[i] * decay - lr * m_hat / (v_hat.sqrt() + h.eps);
        }
        Ok(())
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn snapshot(&self) -> PosteriorSnapshot {
        PosteriorSnapshot::point(self.params.clone())
    }

    fn step_count(&self) -> u64 {
        self.step
    }

    fn current_lr(&self) -> f64 {
        lr_schedule(self.step.min(self.hyper.total_steps), self.hyper.total_steps, self.hyper.lr).unwrap_or(0.0)
    }
}
