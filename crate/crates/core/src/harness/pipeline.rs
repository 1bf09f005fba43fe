use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::checkpoint::{Checkpoint, CheckpointError, NamedArray};
use super::config::{EvalMode, ExperimentConfig, Precision};
use super::task::{batch_indices, generate_finetune, generate_pretrain, Split};
use super::HarnessError;
use crate::metrics::{evaluate, MetricsReport};
use crate::model::{Mode, TinyTransformer};
use crate::optim::{AdamW, AdamWHyper, AnyOptimizer, GaussianPosterior, Optimizer, OptimizerExport, OptimizerKind, PosteriorSnapshot};
use crate::predict::{mc_dropout_predict, predict_at_mean, predict_ensemble, PredictiveBatch};
use crate::rng::{StreamRng, StreamState};
use crate::tensor::Element;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const RUN_FILE: &str = "run.json";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// One line of the metrics JSONL.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub split: String,
    pub mode: String,
    #[serde(flatten)]
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub train_seconds: f64,
    pub eval_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub optimizer: OptimizerKind,
    /// Train and validation metrics at each evaluation step.
    pub series: Vec<EvalRecord>,
    /// Test metrics after the last step.
    pub final_test: Vec<EvalRecord>,
    /// Test metrics at the step with the lowest validation NLL (mean mode).
    pub best_val_test: Vec<EvalRecord>,
    pub best_step: Option<u64>,
    pub timings: Timings,
    pub checkpoint: PathBuf,
}

impl RunRecord {
    pub fn load(dir: &Path) -> Result<Self, HarnessError> {
        let path = dir.join(RUN_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| HarnessError::Io(path.clone(), e))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
    }

    /// Test metrics for a mode label at the final step.
    pub fn final_metrics(&self, mode: &str) -> Option<&MetricsReport> {
        self.final_test.iter().find(|r| r.mode == mode).map(|r| &r.metrics)
    }

    /// Every record in JSONL order.
    pub fn records(&self) -> impl Iterator<Item = &EvalRecord> {
        self.series.iter().chain(&self.final_test).chain(&self.best_val_test)
    }
}

/// Hash that identifies an experiment; the output location is excluded.
pub fn experiment_hash(cfg: &ExperimentConfig) -> String {
    let mut c = cfg.clone();
    c.out_dir = PathBuf::new();
    c.hash()
}

fn file_digest(path: &Path) -> Result<String, HarnessError> {
    let bytes = std::fs::read(path).map_err(|e| HarnessError::Io(path.to_path_buf(), e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_jsonl<'a>(path: &Path, records: impl Iterator<Item = &'a EvalRecord>) -> Result<(), HarnessError> {
    let io = |e| HarnessError::Io(path.to_path_buf(), e);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    for r in records {
        serde_json::to_writer(&mut f, r).map_err(|e| HarnessError::Io(path.to_path_buf(), e.into()))?;
        f.write_all(b"\n").map_err(io)?;
    }
    f.flush().map_err(io)
}

fn create_dir(dir: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::Io(dir.to_path_buf(), e))
}

/// Summary of a pretraining run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub steps: u64,
    pub final_loss: f64,
    pub val_accuracy: f64,
    pub checkpoint: PathBuf,
    pub seconds: f64,
}

/// Trains every base weight on the unshifted pool and writes a base
/// checkpoint to `path`.
pub fn pretrain<T: Element>(cfg: &ExperimentConfig, path: &Path) -> Result<PretrainSummary, HarnessError> {
    cfg.validate()?;
    let start = Instant::now();
    let pool = generate_pretrain(&cfg.task, &cfg.model, cfg.task_seed())?;
    let mut model = TinyTransformer::<T>::init(cfg.model.clone(), &mut StreamRng::new(cfg.seed, "pretrain/init"))?;
    let p = &cfg.pretrain;
    let mut opt = AdamW::new(
        model.trainable_flat(),
        AdamWHyper {
            lr: p.lr,
            weight_decay: p.weight_decay,
            total_steps: p.steps,
            ..AdamWHyper::default()
        },
    )?;
    let order = StreamRng::new(cfg.seed, "pretrain/order");
    let mut recent = Vec::new();
    for t in 0..p.steps {
        let (tokens, labels) = pool.gather(&batch_indices(&order, pool.len(), p.batch_size, t));
        let (loss, grad) = model.loss_and_grad(&tokens, &labels, Mode::Train, None)?;
        check_finite(t, loss, &grad, opt.current_lr())?;
        opt.step(&grad)?;
        model.set_trainable_flat(opt.params())?;
        recent.push(loss);
        if recent.len() > 50 {
            recent.remove(0);
        }
    }
    // held-out accuracy on fresh draws from the same distribution
    let probe = generate_finetune(
        &super::task::TaskSpec {
            shift: 0.0,
            ..cfg.task.clone()
        },
        &cfg.model,
        cfg.task_seed(),
    )?;
    let pred = predict_at_mean(&model, &PosteriorSnapshot::point(model.trainable_flat()), &probe.val.tokens, &probe.val.labels)?;
    let val_accuracy = crate::metrics::accuracy(&pred)?;

    let mut ckpt = Checkpoint::new(serde_json::json!({
        "kind": "base",
        "model": cfg.model,
        "task": cfg.task,
        "seed": cfg.seed,
        "steps": p.steps,
    }));
    for (name, t) in model.named_params() {
        ckpt.push(NamedArray::tensor(name, &t));
    }
    ckpt.save(path)?;
    Ok(PretrainSummary {
        steps: p.steps,
        final_loss: recent.iter().sum::<f64>() / recent.len().max(1) as f64,
        val_accuracy,
        checkpoint: path.to_path_buf(),
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Loads base weights into an unfrozen, adapter-free model.
pub fn load_base<T: Element>(cfg: &ExperimentConfig, path: &Path) -> Result<TinyTransformer<T>, HarnessError> {
    if !path.exists() {
        return Err(HarnessError::MissingBase(path.to_path_buf()));
    }
    let ckpt = Checkpoint::load(path)?;
    if ckpt.meta.get("kind").and_then(|k| k.as_str()) != Some("base") {
        return Err(CheckpointError::Meta(format!("{} is not a base checkpoint", path.display())).into());
    }
    let mut model = TinyTransformer::<T>::skeleton(cfg.model.clone(), false, false)?;
    for (name, t) in model.named_params() {
        let value = ckpt.get(&name)?.to_tensor(t.shape())?;
        model.set_param(&name, value)?;
    }
    Ok(model)
}

/// Base model, frozen, with freshly initialized adapters.
pub fn adapted_model<T: Element>(cfg: &ExperimentConfig) -> Result<TinyTransformer<T>, HarnessError> {
    let mut model = load_base::<T>(cfg, &cfg.finetune.base_checkpoint)?;
    model.freeze();
    model.init_adapters(&mut StreamRng::new(cfg.seed, "finetune/adapters"))?;
    Ok(model)
}

pub fn build_optimizer(cfg: &ExperimentConfig, init: Vec<f64>) -> Result<AnyOptimizer, HarnessError> {
    Ok(match cfg.optimizer.kind {
        OptimizerKind::Adamw => AnyOptimizer::Adamw(AdamW::new(init, cfg.adamw_hyper())?),
        OptimizerKind::Ivon => AnyOptimizer::Ivon(GaussianPosterior::new(init, cfg.ivon_hyper())?),
    })
}

fn check_finite(step: u64, loss: f64, grad: &[f64], lr: f64) -> Result<(), HarnessError> {
    if loss.is_finite() && grad.iter().all(|g| g.is_finite()) {
        return Ok(());
    }
    let max_grad = grad.iter().fold(0.0f64, |m, g| if g.is_nan() { f64::NAN } else { m.max(g.abs()) });
    Err(HarnessError::NonFinite {
        step,
        loss,
        lr,
        max_grad,
    })
}

/// Evaluates `split` under every configured mode the snapshot supports.
pub fn evaluate_modes<T: Element>(
    cfg: &ExperimentConfig,
    model: &TinyTransformer<T>,
    snap: &PosteriorSnapshot,
    split: &Split,
) -> Result<Vec<(PredictiveBatch, MetricsReport)>, HarnessError> {
    let e = &cfg.eval;
    let mut out = Vec::new();
    for mode in &e.modes {
        let pred = match mode {
            EvalMode::Mean => predict_at_mean(model, snap, &split.tokens, &split.labels)?,
            EvalMode::Ensemble if snap.variance.is_some() => {
                let rng = StreamRng::new(cfg.seed, "eval/ensemble");
                predict_ensemble(model, snap, &split.tokens, &split.labels, e.samples, e.tau, &rng)?
            }
            EvalMode::Ensemble => continue,
            EvalMode::McDropout => {
                let rng = StreamRng::new(cfg.seed, "eval/mc_dropout");
                mc_dropout_predict(model, &snap.mean, &split.tokens, &split.labels, e.samples, &rng)?
            }
        };
        let report = evaluate(&pred, e.num_bins)?;
        out.push((pred, report));
    }
    Ok(out)
}

fn records_for(step: u64, split: &str, evals: &[(PredictiveBatch, MetricsReport)]) -> Vec<EvalRecord> {
    evals
        .iter()
        .map(|(p, m)| EvalRecord {
            step,
            split: split.to_string(),
            mode: p.mode.to_string(),
            metrics: m.clone(),
        })
        .collect()
}

#[derive(Clone, Debug)]
struct BestVal {
    step: u64,
    nll: f64,
    snapshot: PosteriorSnapshot,
}

/// Mutable state of a finetuning run between steps.
struct TrainState {
    step: u64,
    opt: AnyOptimizer,
    dropout: StreamRng,
    sampler: StreamRng,
    series: Vec<EvalRecord>,
    best: Option<BestVal>,
    timings: Timings,
}

fn save_state<T: Element>(
    cfg: &ExperimentConfig,
    base_digest: &str,
    model: &TinyTransformer<T>,
    st: &TrainState,
    path: &Path,
) -> Result<(), HarnessError> {
    let export = st.opt.export();
    let mut ckpt = Checkpoint::new(serde_json::json!({
        "kind": "finetune",
        "config": cfg,
        "config_hash": experiment_hash(cfg),
        "base_digest": base_digest,
        "step": st.step,
        "optimizer": { "kind": export.kind, "meta": export.meta },
        "rng": { "dropout": st.dropout.state(), "sampler": st.sampler.state() },
        "series": st.series,
        "best": st.best.as_ref().map(|b| serde_json::json!({ "step": b.step, "nll": b.nll })),
        "timings": st.timings,
    }));
    let mut point = model.clone();
    point.set_trainable_flat(st.opt.params())?;
    for (name, t) in point.named_params() {
        if name.starts_with("lora/") {
            ckpt.push(NamedArray::tensor(name, &t));
        }
    }
    for (name, data) in export.arrays {
        ckpt.push(NamedArray::f64(format!("optim/{name}"), data));
    }
    if let Some(b) = &st.best {
        ckpt.push(NamedArray::f64("best/mean", b.snapshot.mean.clone()));
        if let Some(v) = &b.snapshot.variance {
            ckpt.push(NamedArray::f64("best/variance", v.clone()));
        }
    }
    ckpt.save(path)?;
    Ok(())
}

fn meta_field<T: serde::de::DeserializeOwned>(ckpt: &Checkpoint, key: &str) -> Result<T, HarnessError> {
    serde_json::from_value(ckpt.meta.get(key).cloned().unwrap_or(serde_json::Value::Null))
        .map_err(|e| CheckpointError::Meta(format!("{key}: {e}")).into())
}

fn stream(state: StreamState) -> Result<StreamRng, HarnessError> {
    StreamRng::from_state(&state).ok_or_else(|| CheckpointError::Meta("bad RNG stream state".into()).into())
}

fn load_state(ckpt: &Checkpoint, cfg: &ExperimentConfig, base_digest: &str) -> Result<TrainState, HarnessError> {
    if ckpt.meta.get("kind").and_then(|k| k.as_str()) != Some("finetune") {
        return Err(CheckpointError::Meta("not a finetune checkpoint".into()).into());
    }
    let found: String = meta_field(ckpt, "config_hash")?;
    let expected = experiment_hash(cfg);
    if found != expected {
        return Err(HarnessError::ConfigMismatch { found, expected });
    }
    let digest: String = meta_field(ckpt, "base_digest")?;
    if digest != base_digest {
        return Err(CheckpointError::Meta("checkpoint was trained on a different base".into()).into());
    }
    let opt_meta = ckpt.meta.get("optimizer").cloned().unwrap_or_default();
    let kind: OptimizerKind =
        serde_json::from_value(opt_meta["kind"].clone()).map_err(|e| CheckpointError::Meta(e.to_string()))?;
    let arrays = ckpt
        .arrays
        .iter()
        .filter_map(|a| a.name.strip_prefix("optim/").map(|n| (n.to_string(), a)))
        .map(|(n, a)| a.as_f64().map(|d| (n, d)))
        .collect::<Result<Vec<_>, _>>()?;
    let opt = AnyOptimizer::import(&OptimizerExport {
        kind,
        meta: opt_meta["meta"].clone(),
        arrays,
    })?;
    let rng = ckpt.meta.get("rng").cloned().unwrap_or_default();
    let parse = |k: &str| -> Result<StreamState, HarnessError> {
        serde_json::from_value(rng[k].clone()).map_err(|e| CheckpointError::Meta(e.to_string()).into())
    };
    let best = match ckpt.meta.get("best") {
        Some(b) if !b.is_null() => Some(BestVal {
            step: b["step"].as_u64().ok_or_else(|| CheckpointError::Meta("best.step".into()))?,
            nll: b["nll"].as_f64().ok_or_else(|| CheckpointError::Meta("best.nll".into()))?,
            snapshot: PosteriorSnapshot {
                mean: ckpt.get("best/mean")?.as_f64()?,
                variance: if ckpt.has("best/variance") {
                    Some(ckpt.get("best/variance")?.as_f64()?)
                } else {
                    None
                },
            },
        }),
        _ => None,
    };
    Ok(TrainState {
        step: meta_field(ckpt, "step")?,
        opt,
        dropout: stream(parse("dropout")?)?,
        sampler: stream(parse("sampler")?)?,
        series: meta_field(ckpt, "series")?,
        best,
        timings: meta_field(ckpt, "timings")?,
    })
}

#[derive(Clone, Debug, Default)]
pub struct FinetuneOptions {
    /// Continue from this finetune checkpoint.
    pub resume: Option<PathBuf>,
    /// Print progress lines to stderr.
    pub verbose: bool,
}

/// Trains the adapters for `finetune.steps` steps, evaluating train and
/// validation splits every `eval_interval` steps and the test split at the
/// end (final and best-validation parameters). Writes `metrics.jsonl`,
/// `run.json` and `final.ckpt` under `out_dir`.
pub fn run_finetune<T: Element>(cfg: &ExperimentConfig, opts: &FinetuneOptions) -> Result<RunRecord, HarnessError> {
    cfg.validate()?;
    let out = cfg.out_dir.clone();
    create_dir(&out)?;
    let data = generate_finetune(&cfg.task, &cfg.model, cfg.task_seed())?;
    let base_path = &cfg.finetune.base_checkpoint;
    let mut model = adapted_model::<T>(cfg)?;
    let base_digest = file_digest(base_path)?;

    let mut st = match &opts.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let st = load_state(&ckpt, cfg, &base_digest)?;
            if st.opt.num_params() != model.num_trainable() {
                return Err(crate::error::ModelError::ParamCount {
                    expected: model.num_trainable(),
                    got: st.opt.num_params(),
                }
                .into());
            }
            st
        }
        None => TrainState {
            step: 0,
            opt: build_optimizer(cfg, model.trainable_flat())?,
            dropout: StreamRng::new(cfg.seed, "finetune/dropout"),
            sampler: StreamRng::new(cfg.seed, "finetune/posterior"),
            series: Vec::new(),
            best: None,
            timings: Timings::default(),
        },
    };
    model.set_trainable_flat(st.opt.params())?;

    let order = StreamRng::new(cfg.seed, "finetune/order");
    let f = &cfg.finetune;
    let mut train_clock = Instant::now();
    while st.step < f.steps {
        let t = st.step;
        let (tokens, labels) = data.train.gather(&batch_indices(&order, data.train.len(), f.batch_size, t));
        for _ in 0..st.opt.mc_samples() {
            if let Some(theta) = st.opt.draw(&mut st.sampler) {
                model.set_trainable_flat(theta)?;
            }
            let lr = st.opt.current_lr();
            let (loss, grad) = model
                .loss_and_grad(&tokens, &labels, Mode::Train, Some(&mut st.dropout))
                .map_err(|e| match e {
                    crate::error::ModelError::Tensor(crate::error::TensorError::Invalid(_)) => HarnessError::NonFinite {
                        step: t,
                        loss: f64::NAN,
                        lr,
                        max_grad: f64::NAN,
                    },
                    other => other.into(),
                })?;
            check_finite(t, loss, &grad, lr)?;
            st.opt.accumulate(&grad)?;
        }
        st.opt.apply()?;
        if st.opt.kind() == OptimizerKind::Adamw {
            model.set_trainable_flat(st.opt.params())?;
        }
        st.step += 1;

        let s = st.step;
        if s % f.eval_interval == 0 || s == f.steps {
            st.timings.train_seconds += train_clock.elapsed().as_secs_f64();
            let eval_clock = Instant::now();
            let snap = st.opt.snapshot();
            let train_eval = evaluate_modes(cfg, &model, &snap, &data.train)?;
            let val_eval = evaluate_modes(cfg, &model, &snap, &data.val)?;
            st.series.extend(records_for(s, "train", &train_eval));
            st.series.extend(records_for(s, "val", &val_eval));
            let val_nll = predict_at_mean(&model, &snap, &data.val.tokens, &data.val.labels)
                .map_err(HarnessError::from)
                .and_then(|p| Ok(crate::metrics::nll(&p)?))?;
            if st.best.as_ref().map_or(true, |b| val_nll < b.nll) {
                st.best = Some(BestVal {
                    step: s,
                    nll: val_nll,
                    snapshot: snap,
                });
            }
            if opts.verbose {
                let mean_val = val_eval.first().map(|(_, m)| m.acc).unwrap_or(f64::NAN);
                eprintln!("[{}] step {s}/{} val nll {val_nll:.4} acc {mean_val:.4}", st.opt.kind(), f.steps);
            }
            st.timings.eval_seconds += eval_clock.elapsed().as_secs_f64();
            train_clock = Instant::now();
        }
        if f.checkpoint_interval > 0 && s % f.checkpoint_interval == 0 && s < f.steps {
            save_state(cfg, &base_digest, &model, &st, &out.join(format!("step-{s}.ckpt")))?;
        }
    }

    let eval_clock = Instant::now();
    let snap = st.opt.snapshot();
    let final_eval = evaluate_modes(cfg, &model, &snap, &data.test)?;
    let final_test = records_for(f.steps, "test", &final_eval);
    let (best_step, best_val_test) = match &st.best {
        Some(b) => {
            let ev = evaluate_modes(cfg, &model, &b.snapshot, &data.test)?;
            (Some(b.step), records_for(b.step, "test_best_val", &ev))
        }
        None => (None, Vec::new()),
    };
    if cfg.eval.dump_predictions {
        for (pred, _) in &final_eval {
            let name = format!("predictions_{}.jsonl", pred.mode.to_string().split('(').next().unwrap_or("mode"));
            let path = out.join(name);
            let file = std::fs::File::create(&path).map_err(|e| HarnessError::Io(path.clone(), e))?;
            pred.write_jsonl(std::io::BufWriter::new(file))
                .map_err(|e| HarnessError::Io(path.clone(), e))?;
        }
    }
    st.timings.eval_seconds += eval_clock.elapsed().as_secs_f64();

    let ckpt_path = out.join(FINAL_CHECKPOINT);
    save_state(cfg, &base_digest, &model, &st, &ckpt_path)?;
    let record = RunRecord {
        config_hash: experiment_hash(cfg),
        config: cfg.clone(),
        optimizer: st.opt.kind(),
        series: st.series,
        final_test,
        best_val_test,
        best_step,
        timings: st.timings,
        checkpoint: ckpt_path,
    };
    write_jsonl(&out.join(METRICS_FILE), record.records())?;
    let run_path = out.join(RUN_FILE);
    let json = serde_json::to_string_pretty(&record).expect("run record serializes");
    std::fs::write(&run_path, json).map_err(|e| HarnessError::Io(run_path, e))?;
    Ok(record)
}

/// Model with adapters restored from a finetune checkpoint, plus the
/// optimizer's posterior snapshot.
pub fn load_finetuned<T: Element>(
    cfg: &ExperimentConfig,
    path: &Path,
) -> Result<(TinyTransformer<T>, PosteriorSnapshot, OptimizerKind), HarnessError> {
    let mut model = adapted_model::<T>(cfg)?;
    let ckpt = Checkpoint::load(path)?;
    let st = load_state(&ckpt, cfg, &file_digest(&cfg.finetune.base_checkpoint)?)?;
    model.set_trainable_flat(st.opt.params())?;
    for (name, t) in model.named_params() {
        if name.starts_with("lora/") {
            let stored = ckpt.get(&name)?.to_tensor::<T>(t.shape())?;
            if stored != t {
                return Err(CheckpointError::Meta(format!("{name} disagrees with optimizer state")).into());
            }
        }
    }
    Ok((model, st.opt.snapshot(), st.opt.kind()))
}

/// The experiment config a finetune checkpoint was written with.
pub fn checkpoint_config(path: &Path) -> Result<ExperimentConfig, HarnessError> {
    meta_field(&Checkpoint::load(path)?, "config")
}

/// Test-split metrics of a finetuned checkpoint under the configured modes.
pub fn evaluate_checkpoint<T: Element>(cfg: &ExperimentConfig, path: &Path) -> Result<Vec<EvalRecord>, HarnessError> {
    let (model, snap, _) = load_finetuned::<T>(cfg, path)?;
    let data = generate_finetune(&cfg.task, &cfg.model, cfg.task_seed())?;
    let step = cfg.finetune.steps;
    Ok(records_for(step, "test", &evaluate_modes(cfg, &model, &snap, &data.test)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TauRow {
    pub tau: f64,
    pub acc: f64,
    pub ece: f64,
    pub nll: f64,
    pub brier: f64,
}

/// Test metrics of `N(m, diag(τ v))` ensembles over `grid`, all members
/// drawn from the same evaluation stream as the run's own ensemble.
pub fn tau_sweep<T: Element>(
    cfg: &ExperimentConfig,
    run: &RunRecord,
    grid: &[f64],
    samples: usize,
) -> Result<Vec<TauRow>, HarnessError> {
    if run.optimizer != OptimizerKind::Ivon {
        return Err(HarnessError::NotIvon(run.optimizer));
    }
    let (model, snap, _) = load_finetuned::<T>(cfg, &run.checkpoint)?;
    let data = generate_finetune(&cfg.task, &cfg.model, cfg.task_seed())?;
    let rng = StreamRng::new(cfg.seed, "eval/ensemble");
    grid.iter()
        .map(|&tau| {
            let pred = predict_ensemble(&model, &snap, &data.test.tokens, &data.test.labels, samples, tau, &rng)?;
            let m = evaluate(&pred, cfg.eval.num_bins)?;
            Ok(TauRow {
                tau,
                acc: m.acc,
                ece: m.ece,
                nll: m.nll,
                brier: m.brier,
            })
        })
        .collect()
}

/// Precision dispatch for [`pretrain`].
pub fn pretrain_any(cfg: &ExperimentConfig, path: &Path) -> Result<PretrainSummary, HarnessError> {
    match cfg.precision {
        Precision::F32 => pretrain::<f32>(cfg, path),
        Precision::F64 => pretrain::<f64>(cfg, path),
    }
}

/// Precision dispatch for [`run_finetune`].
pub fn finetune_any(cfg: &ExperimentConfig, opts: &FinetuneOptions) -> Result<RunRecord, HarnessError> {
    match cfg.precision {
        Precision::F32 => run_finetune::<f32>(cfg, opts),
        Precision::F64 => run_finetune::<f64>(cfg, opts),
    }
}

/// Precision dispatch for [`evaluate_checkpoint`].
pub fn evaluate_any(cfg: &ExperimentConfig, path: &Path) -> Result<Vec<EvalRecord>, HarnessError> {
    match cfg.precision {
        Precision::F32 => evaluate_checkpoint::<f32>(cfg, path),
        Precision::F64 => evaluate_checkpoint::<f64>(cfg, path),
    }
}

/// Precision dispatch for [`tau_sweep`].
pub fn tau_sweep_any(cfg: &ExperimentConfig, run: &RunRecord, grid: &[f64], samples: usize) -> Result<Vec<TauRow>, HarnessError> {
    match cfg.precision {
        Precision::F32 => tau_sweep::<f32>(cfg, run, grid, samples),
        Precision::F64 => tau_sweep::<f64>(cfg, run, grid, samples),
    }
}
