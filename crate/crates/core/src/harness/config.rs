//! Experiment configuration: one TOML document, unknown keys rejected,
//! individual keys overridable through `IVLORA_SECTION__KEY` variables.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::task::TaskSpec;
use super::HarnessError;
use crate::model::ModelConfig;
use crate::optim::{AdamWHyper, IvonHyper, OptimizerKind};

pub const ENV_PREFIX: &str = "IVLORA_";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(format!("unknown precision {other:?} (expected f32 or f64)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub steps: u64,
    pub batch_size: usize,
    /// Train/validation evaluation every this many steps (and at the end).
    pub eval_interval: u64,
    /// Intermediate checkpoint every this many steps; 0 disables them.
    pub checkpoint_interval: u64,
    pub base_checkpoint: PathBuf,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            eval_interval: 200,
            checkpoint_interval: 0,
            base_checkpoint: PathBuf::from("runs/base/base.ckpt"),
        }
    }
}

/// Optimizer choice plus hyperparameters for both arms. `total_steps` in
/// either table is ignored; the schedule always spans `finetune.steps`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub adamw: AdamWHyper,
    pub ivon: IvonHyper,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Ivon,
            adamw: AdamWHyper::default(),
            ivon: IvonHyper::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Mean,
    Ensemble,
    McDropout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Members per ensemble / MC-dropout prediction.
    pub samples: usize,
    pub tau: f64,
    pub num_bins: usize,
    /// Modes evaluated at every interval and at the end. Modes the optimizer
    /// cannot provide (an ensemble from AdamW) are skipped.
    pub modes: Vec<EvalMode>,
    pub tau_grid: Vec<f64>,
    /// Also write per-example test predictions.
    pub dump_predictions: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 10,
            tau: 1.0,
            num_bins: 15,
            modes: vec![EvalMode::Mean, EvalMode::Ensemble],
            tau_grid: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            dump_predictions: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub precision: Precision,
    pub out_dir: PathBuf,
    pub task: TaskSpec,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub optimizer: OptimizerConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: Precision::F32,
            out_dir: PathBuf::from("runs/default"),
            task: TaskSpec::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            optimizer: OptimizerConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        Self::from_toml_with_overrides(text, std::iter::empty::<(String, String)>())
    }

    /// Parses `text`, then applies `(KEY, value)` overrides whose key starts
    /// with [`ENV_PREFIX`]; `__` separates nesting levels.
    pub fn from_toml_with_overrides<I, K, V>(text: &str, vars: I) -> Result<Self, HarnessError>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let mut tree: toml::Table = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        for (key, value) in vars {
            let Some(path) = key.as_ref().strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let path: Vec<String> = path.split("__").map(|p| p.to_ascii_lowercase()).collect();
            set_path(&mut tree, &path, parse_scalar(value.as_ref()))?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(tree)
            .try_into()
            .map_err(|e: toml::de::Error| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and applies overrides from the process environment.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io(path.to_path_buf(), e))?;
        Self::from_toml_with_overrides(&text, std::env::vars())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        self.model.validate()?;
        self.task.validate()?;
        self.optimizer.adamw.validate()?;
        self.optimizer.ivon.validate()?;
        if self.finetune.steps == 0 || self.finetune.batch_size == 0 {
            return bad("finetune steps and batch_size must be positive".into());
        }
        if self.pretrain.steps == 0 || self.pretrain.batch_size == 0 {
            return bad("pretrain steps and batch_size must be positive".into());
        }
        if self.finetune.eval_interval == 0 {
            return bad("finetune.eval_interval must be positive".into());
        }
        if self.eval.samples == 0 || self.eval.num_bins == 0 {
            return bad("eval.samples and eval.num_bins must be positive".into());
        }
        if !(self.eval.tau >= 0.0) || self.eval.tau_grid.iter().any(|t| !(*t >= 0.0)) {
            return bad("tau values must be nonnegative".into());
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn task_seed(&self) -> u64 {
        self.task.seed.unwrap_or(self.seed)
    }

    pub fn adamw_hyper(&self) -> AdamWHyper {
        AdamWHyper {
            total_steps: self.finetune.steps,
            ..self.optimizer.adamw.clone()
        }
    }

    pub fn ivon_hyper(&self) -> IvonHyper {
        IvonHyper {
            total_steps: self.finetune.steps,
            ..self.optimizer.ivon.clone()
        }
    }
}

fn parse_scalar(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(tree: &mut toml::Table, path: &[String], value: toml::Value) -> Result<(), HarnessError> {
    let (last, parents) = path.split_last().ok_or_else(|| HarnessError::Config("empty override key".into()))?;
    let mut cur = tree;
    for p in parents {
        let entry = cur
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| HarnessError::Config(format!("override path crosses non-table key {p}")))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}
