use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ivon_lora::harness::{
    self, aggregate, evaluate_any, finetune_any, format_table, pretrain_any, tau_sweep_any, timing, ExperimentConfig,
    FinetuneOptions, Precision, RunRecord,
};
use ivon_lora::optim::OptimizerKind;

#[derive(Parser)]
#[command(name = "ivon-lora", version, about = "IVON vs AdamW adapter finetuning on a synthetic task")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    optimizer: Option<OptimizerKind>,
    #[arg(long)]
    precision: Option<Precision>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => ExperimentConfig::from_toml_with_overrides("", std::env::vars())?,
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        if let Some(k) = self.optimizer {
            cfg.optimizer.kind = k;
        }
        if let Some(p) = self.precision {
            cfg.precision = p;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the base model on the unshifted pool and write `<out>/base.ckpt`.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Finetune adapters; writes metrics.jsonl, run.json and final.ckpt.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Resume from an intermediate checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Base checkpoint (overrides `finetune.base_checkpoint`).
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a finetuned checkpoint on the test split, using the config
    /// stored in the checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out>/final.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate τ-scaled posterior ensembles of a finished IVON run.
    TauSweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated τ values (default: `eval.tau_grid`).
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Time the forward/backward, sampling and update phases.
    Profile {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 10)]
        warmup: usize,
        #[arg(long, default_value_t = 50)]
        iters: usize,
        /// Adapter ranks to profile.
        #[arg(long, value_delimiter = ',', default_value = "2,8,32")]
        ranks: Vec<usize>,
    },
    /// Aggregate finished runs into a comparison table.
    Report {
        /// Run directories, or parents of run directories.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        json: bool,
    },
}

fn collect_runs(paths: &[PathBuf]) -> Result<Vec<RunRecord>> {
    let mut runs = Vec::new();
    for p in paths {
        if p.join(harness::RUN_FILE).exists() {
            runs.push(RunRecord::load(p)?);
            continue;
        }
        let mut children: Vec<_> = std::fs::read_dir(p)
            .with_context(|| format!("reading {}", p.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|c| c.join(harness::RUN_FILE).exists())
            .collect();
        children.sort();
        for c in children {
            runs.push(RunRecord::load(&c)?);
        }
    }
    if runs.is_empty() {
        bail!("no {} found under the given paths", harness::RUN_FILE);
    }
    Ok(runs)
}

fn print_records(records: &[harness::EvalRecord]) {
    for r in records {
        let m = &r.metrics;
        println!(
            "{:<14} {:<24} acc {:.4}  ece {:.4}  nll {:.4}  brier {:.4}  n {}",
            r.split, r.mode, m.acc, m.ece, m.nll, m.brier, m.n
        );
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Pretrain { common } => {
            let cfg = common.load()?;
            let path = cfg.out_dir.join("base.ckpt");
            let s = pretrain_any(&cfg, &path)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Command::Finetune {
            common,
            resume,
            base,
            quiet,
        } => {
            let mut cfg = common.load()?;
            if let Some(b) = base {
                cfg.finetune.base_checkpoint = b;
            }
            let run = finetune_any(&cfg, &FinetuneOptions { resume, verbose: !quiet })?;
            print_records(&run.final_test);
            print_records(&run.best_val_test);
            println!("wrote {}", cfg.out_dir.display());
        }
        Command::Eval { common, checkpoint } => {
            let path = match checkpoint {
                Some(p) => p,
                None => common.load()?.out_dir.join(harness::FINAL_CHECKPOINT),
            };
            // evaluate under the config the run was trained with
            let cfg = harness::checkpoint_config(&path)?;
            for r in evaluate_any(&cfg, &path)? {
                println!("{}", serde_json::to_string(&r)?);
            }
        }
        Command::TauSweep { common, grid, samples } => {
            let cfg = common.load()?;
            let run = RunRecord::load(&cfg.out_dir)?;
            let grid = grid.unwrap_or_else(|| cfg.eval.tau_grid.clone());
            let rows = tau_sweep_any(&run.config, &run, &grid, samples.unwrap_or(cfg.eval.samples))?;
            println!("| tau | ACC | ECE | NLL | Brier |\n|---|---|---|---|---|");
            for r in &rows {
                println!("| {} | {:.4} | {:.4} | {:.4} | {:.4} |", r.tau, r.acc, r.ece, r.nll, r.brier);
            }
            let path = cfg.out_dir.join("tau_sweep.json");
            std::fs::write(&path, serde_json::to_string_pretty(&rows)?)?;
        }
        Command::Profile {
            common,
            warmup,
            iters,
            ranks,
        } => profile(&common.load()?, warmup, iters, &ranks)?,
        Command::Report { runs, json } => {
            let rows = aggregate(&collect_runs(&runs)?);
            if json {
                println!("{}", serde_json::to_string_pretty(&rows)?);
            } else {
                print!("{}", format_table(&rows));
            }
        }
    }
    Ok(())
}

fn profile(cfg: &ExperimentConfig, warmup: usize, iters: usize, ranks: &[usize]) -> Result<()> {
    let mut params = Vec::new();
    let mut overhead = Vec::new();
    for &r in ranks {
        let mut c = cfg.clone();
        c.model.lora.rank = r;
        let rep = match c.precision {
            Precision::F32 => harness::profile_timing::<f32>(&c, warmup, iters)?,
            Precision::F64 => harness::profile_timing::<f64>(&c, warmup, iters)?,
        };
        println!("{}", serde_json::to_string(&rep)?);
        params.push(rep.trainable_params as f64);
        overhead.push(rep.sample_ms.mean_ms + rep.opt_step_ms.mean_ms);
    }
    if ranks.len() >= 2 {
        println!("sample+opt vs params: R^2 = {:.4}", timing::linear_fit_r2(&params, &overhead));
    }
    Ok(())
}
