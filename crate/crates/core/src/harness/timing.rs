//! Per-phase wall-clock profile of a training step.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::task::{batch_indices, generate_finetune};
use super::{build_optimizer, HarnessError};
use crate::model::{Mode, TinyTransformer};
use crate::optim::{Optimizer, OptimizerKind};
use crate::rng::StreamRng;
use crate::tensor::Element;

pub const MIN_TIMED_ITERS: usize = 30;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseStats {
    pub mean_ms: f64,
    pub std_ms: f64,
}

impl PhaseStats {
    fn from_samples(ms: &[f64]) -> Self {
        let n = ms.len() as f64;
        let mean = ms.iter().sum::<f64>() / n;
        let var = ms.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0).max(1.0);
        Self {
            mean_ms: mean,
            std_ms: var.sqrt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub optimizer: OptimizerKind,
    pub rank: usize,
    pub trainable_params: usize,
    pub batch_size: usize,
    pub iters: usize,
    pub fwd_bwd_ms: PhaseStats,
    /// Drawing θ and writing it into the model; zero for AdamW.
    pub sample_ms: PhaseStats,
    /// Optimizer update, including AdamW's write-back of the new weights.
    pub opt_step_ms: PhaseStats,
}

impl TimingReport {
    /// `(sample + opt_step) / fwd_bwd`.
    pub fn overhead_ratio(&self) -> f64 {
        (self.sample_ms.mean_ms + self.opt_step_ms.mean_ms) / self.fwd_bwd_ms.mean_ms
    }
}

/// Times `iters` steps after `warmup` untimed ones on a randomly initialized
/// base (no pretrained checkpoint needed). Both optimizers see the same
/// batches.
pub fn profile_timing<T: Element>(cfg: &ExperimentConfig, warmup: usize, iters: usize) -> Result<TimingReport, HarnessError> {
    if iters < MIN_TIMED_ITERS {
        return Err(HarnessError::Config(format!("need at least {MIN_TIMED_ITERS} timed iterations, got {iters}")));
    }
    let total = (warmup + iters) as u64;
    let mut cfg = cfg.clone();
    cfg.finetune.steps = total;
    cfg.validate()?;
    let data = generate_finetune(&cfg.task, &cfg.model, cfg.task_seed())?;
    let mut model = TinyTransformer::<T>::init(cfg.model.clone(), &mut StreamRng::new(cfg.seed, "profile/init"))?;
    model.freeze();
    model.init_adapters(&mut StreamRng::new(cfg.seed, "finetune/adapters"))?;
    let mut opt = build_optimizer(&cfg, model.trainable_flat())?;
    let order = StreamRng::new(cfg.seed, "finetune/order");
    let mut dropout = StreamRng::new(cfg.seed, "finetune/dropout");
    let mut sampler = StreamRng::new(cfg.seed, "finetune/posterior");
    let bs = cfg.finetune.batch_size;
    let (mut fwd, mut samp, mut upd) = (Vec::new(), Vec::new(), Vec::new());
    let is_ivon = opt.kind() == OptimizerKind::Ivon;
    for t in 0..total {
        let (tokens, labels) = data.train.gather(&batch_indices(&order, data.train.len(), bs, t));
        let mut sample_ms = 0.0;
        let mut fwd_ms = 0.0;
        let mut opt_ms = 0.0;
        for _ in 0..opt.mc_samples() {
            if is_ivon {
                let c = Instant::now();
                if let Some(theta) = opt.draw(&mut sampler) {
                    model.set_trainable_flat(theta)?;
                }
                sample_ms += c.elapsed().as_secs_f64() * 1e3;
            }
            let c = Instant::now();
            let (_, grad) = model.loss_and_grad(&tokens, &labels, Mode::Train, Some(&mut dropout))?;
            fwd_ms += c.elapsed().as_secs_f64() * 1e3;
            let c = Instant::now();
            opt.accumulate(&grad)?;
            opt_ms += c.elapsed().as_secs_f64() * 1e3;
        }
        let c = Instant::now();
        opt.apply()?;
        if !is_ivon {
            model.set_trainable_flat(opt.params())?;
        }
        opt_ms += c.elapsed().as_secs_f64() * 1e3;
        if t as usize >= warmup {
            fwd.push(fwd_ms);
            samp.push(sample_ms);
            upd.push(opt_ms);
        }
    }
    Ok(TimingReport {
        optimizer: opt.kind(),
        rank: cfg.model.lora.rank,
        trainable_params: model.num_trainable(),
        batch_size: bs,
        iters,
        fwd_bwd_ms: PhaseStats::from_samples(&fwd),
        sample_ms: PhaseStats::from_samples(&samp),
        opt_step_ms: PhaseStats::from_samples(&upd),
    })
}

/// Coefficient of determination of the least-squares line through `(x, y)`.
pub fn linear_fit_r2(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    if syy == 0.0 {
        return 1.0;
    }
    sxy * sxy / (sxx * syy)
}
