//! Acceptance suite: one pass/fail line per criterion, nonzero exit on any
//! failure. `ACCEPTANCE_ONLY=2,5` restricts the run to a subset.

mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use common::{conjugate, estimators, gradcheck, rows, tiny};
use ivon_lora::harness::{
    self, pretrain, profile_timing, run_finetune, ExperimentConfig, FinetuneOptions, RunRecord, TauRow,
    FINAL_CHECKPOINT, METRICS_FILE,
};
use ivon_lora::metrics::{brier, ece, evaluate, nll};
use ivon_lora::model::{Mode, TinyTransformer};
use ivon_lora::optim::{GaussianPosterior, IvonHyper, OptimizerKind, PosteriorSnapshot};
use ivon_lora::predict::{predict_at_mean, predict_ensemble, PredictionMode, PredictiveBatch};
use ivon_lora::rng::StreamRng;
use ivon_lora_oracles::{brute_force_metrics, exact_gaussian_posterior, QuadraticProblem};
use rand::SeedableRng;

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(label: &str, secs: f64, limit: f64) -> Check {
    ensure(secs < limit, format!("{label} {secs:.1}s (limit {limit:.0}s)"))
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn desk_config() -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    ExperimentConfig::from_toml_str(&fs::read_to_string(&path).expect("configs/desk.toml")).expect("desk config")
}

fn with_kind(cfg: &ExperimentConfig, kind: OptimizerKind) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.optimizer.kind = kind;
    c
}

// 1
fn gradient_correctness() -> Check {
    let t = Instant::now();
    let results = gradcheck::check_all_ops(100, 2024);
    let secs = t.elapsed().as_secs_f64();
    let bad: Vec<String> = results
        .iter()
        .filter(|r| r.failures > 0)
        .map(|r| format!("{} ({}/{})", r.op, r.failures, r.instances))
        .collect();
    let ops = results.len();
    let min_inst = results.iter().map(|r| r.instances).min().unwrap_or(0);
    ensure(bad.is_empty() && min_inst >= 100, format!("{ops} ops x {min_inst} instances, failing: {bad:?}"))?;
    within(&format!("{ops} ops x {min_inst} instances within 1e-4 rel / 1e-6 abs,"), secs, 60.0)
}

// 2
fn conjugate_convergence() -> Check {
    let one_d = exact_gaussian_posterior(&QuadraticProblem::new(vec![1.0], vec![1.0], 10), 1.0);
    ensure(
        (one_d.mean[0] - 10.0 / 11.0).abs() < 1e-12 && (one_d.variance[0] - 1.0 / 11.0).abs() < 1e-12,
        format!("oracle 1-D case gave mean {} var {}", one_d.mean[0], one_d.variance[0]),
    )?;
    let t = Instant::now();
    let run = conjugate::run(5000, 1);
    let secs = t.elapsed().as_secs_f64();
    let (me, ve) = (run.max_mean_error(), run.max_relative_variance_error());
    ensure(me < 1e-3 && ve < 0.05, format!("max |m - m*| {me:.2e} (< 1e-3), max rel var err {ve:.3} (< 0.05)"))?;
    within(&format!("max |m - m*| {me:.2e}, max rel var err {ve:.4},"), secs, 60.0)
}

// 3
fn hessian_unbiasedness() -> Check {
    let t = Instant::now();
    let mc = estimators::hessian_estimates(3.0, 10_000, 3);
    let secs = t.elapsed().as_secs_f64();
    let z = (mc.mean - 3.0) / mc.std_error;
    ensure(z.abs() < 3.0, format!("mean {:.4}, {z:+.2} SE from 3", mc.mean))?;
    within(&format!("mean ĥ {:.4} ({z:+.2} SE),", mc.mean), secs, 10.0)
}

// 4
fn degenerate_identities() -> Check {
    let cfg = tiny::config(Path::new("/nonexistent"), "ivon");
    let mut rng = StreamRng::new(41, "identities");
    let mut base = TinyTransformer::<f32>::init(cfg.model.clone(), &mut rng).map_err(|e| e.to_string())?;
    base.freeze();
    base.init_adapters(&mut rng).map_err(|e| e.to_string())?;
    let n = base.num_trainable();
    let theta: Vec<f64> = (0..n).map(|_| 0.3 * rng.normal()).collect();
    base.set_trainable_flat(&theta).map_err(|e| e.to_string())?;
    let snap = PosteriorSnapshot {
        mean: theta.clone(),
        variance: Some((0..n).map(|_| 0.05 * rng.uniform() + 1e-3).collect()),
    };
    let seq = cfg.model.seq_len;
    let tokens: Vec<usize> = (0..100 * seq).map(|_| rng.below(cfg.model.vocab_size)).collect();
    let labels: Vec<usize> = (0..100).map(|_| rng.below(cfg.model.num_classes)).collect();

    let mean = predict_at_mean(&base, &snap, &tokens, &labels).map_err(|e| e.to_string())?;
    let ens = predict_ensemble(&base, &snap, &tokens, &labels, 1, 0.0, &StreamRng::new(1, "e")).map_err(|e| e.to_string())?;
    let bitwise_pred = mean.probs.iter().zip(&ens.probs).all(|(a, b)| a.to_bits() == b.to_bits());

    let post = GaussianPosterior::new(theta.clone(), IvonHyper { ess: 100.0, ..IvonHyper::default() }).map_err(|e| e.to_string())?;
    let s = post.sample(0.0, &mut rng).map_err(|e| e.to_string())?;
    let bitwise_sample = s.iter().zip(post.mean()).all(|(a, b)| a.to_bits() == b.to_bits());

    let mut merged = base.clone();
    merged.merge_adapters().map_err(|e| e.to_string())?;
    let mut merge_err = 0f64;
    for i in 0..100 {
        let x = &tokens[i * seq..(i + 1) * seq];
        let a = base.logits(x, Mode::Eval, None).map_err(|e| e.to_string())?;
        let b = merged.logits(x, Mode::Eval, None).map_err(|e| e.to_string())?;
        for (p, q) in a.data().iter().zip(b.data()) {
            merge_err = merge_err.max((p - q).abs() as f64);
        }
    }

    // ĥ = h exactly: pick θ − m = 1/2 and ĝ = h / (½ λ (h + δ))
    let h0 = 0.37;
    let hyper = IvonHyper {
        ess: 20.0,
        h0,
        weight_decay: 0.1,
        total_steps: 10,
        ..IvonHyper::default()
    };
    let mut fixed = GaussianPosterior::new(vec![0.25, -1.0, 2.0], hyper.clone()).map_err(|e| e.to_string())?;
    let th: Vec<f64> = fixed.mean().iter().map(|m| m + 0.5).collect();
    let g: Vec<f64> = vec![h0 / (0.5 * hyper.ess * (h0 + hyper.weight_decay)); 3];
    let hhat = fixed.hessian_estimate(&g, &th);
    fixed.step_with_sample(&g, &th).map_err(|e| e.to_string())?;
    let h_drift = fixed
        .hessian()
        .iter()
        .zip(&hhat)
        .map(|(h, e)| (h - h0).abs().max((e - h0).abs()))
        .fold(0.0, f64::max);

    ensure(
        bitwise_pred && bitwise_sample && merge_err <= 1e-5 && h_drift <= 1e-12,
        format!(
            "ensemble(S=1,tau=0)==mean bitwise: {bitwise_pred}; sample(tau=0)==m bitwise: {bitwise_sample}; \
             merged vs unmerged max |diff| {merge_err:.1e} (<= 1e-5); h drift at fixed point {h_drift:.1e}"
        ),
    )
}

// 5
fn metrics_oracle() -> Check {
    let mut rng = rand::rngs::StdRng::seed_from_u64(5);
    let mut worst = 0f64;
    for (k, bins) in [(2, 15), (4, 15), (10, 10)] {
        let b = rows::random_batch(&mut rng, 10_000, k);
        let r = evaluate(&b, bins).map_err(|e| e.to_string())?;
        let o = brute_force_metrics(&b.probs, k, &b.labels, bins);
        for (x, y) in [(r.acc, o.acc), (r.ece, o.ece), (r.nll, o.nll), (r.brier, o.brier)] {
            worst = worst.max((x - y).abs());
        }
        let counts: Vec<usize> = r.bins.iter().map(|b| b.count).collect();
        if counts != o.bin_counts {
            return Err(format!("bin counts differ for K={k}"));
        }
    }
    let batch = |p: Vec<f64>, k, y| PredictiveBatch::new(p, k, y, PredictionMode::Mean).unwrap();
    let e = ece(&batch(vec![0.8, 0.2, 0.2, 0.8], 2, vec![1, 0]), 15).map_err(|e| e.to_string())?;
    let br = brier(&batch(vec![0.25; 4], 4, vec![3])).map_err(|e| e.to_string())?;
    let nl = nll(&batch(vec![0.5, 0.5], 2, vec![0])).map_err(|e| e.to_string())?;
    let hand = (e - 0.8).abs() < 1e-12 && (br - 0.75).abs() < 1e-12 && (nl - 2f64.ln()).abs() < 1e-12;
    ensure(
        worst <= 1e-12 && hand,
        format!("3 x 1e4 rows, max |diff| {worst:.1e}; hand values ECE {e} Brier {br} NLL {nl:.6}"),
    )
}

struct SeedResult {
    seed: u64,
    adamw: RunRecord,
    ivon: RunRecord,
    sweep: Vec<TauRow>,
}

struct Replication {
    seeds: Vec<SeedResult>,
    secs: f64,
    configs: (ExperimentConfig, ExperimentConfig),
}

fn ensemble_metrics(run: &RunRecord) -> Option<&ivon_lora::metrics::MetricsReport> {
    run.final_test.iter().find(|r| r.mode.starts_with("ensemble")).map(|r| &r.metrics)
}

fn replicate(work: &Path) -> Result<Replication, String> {
    let t = Instant::now();
    let mut desk = desk_config();
    desk.finetune.base_checkpoint = work.join("base.ckpt");
    let base = pretrain::<f32>(&desk, &desk.finetune.base_checkpoint).map_err(|e| e.to_string())?;
    eprintln!("  pretrained base: val acc {:.3} in {:.0}s", base.val_accuracy, base.seconds);
    let adamw = with_kind(&desk, OptimizerKind::Adamw);
    let ivon = with_kind(&desk, OptimizerKind::Ivon);
    let mut seeds = Vec::new();
    for seed in 0..3u64 {
        let mut runs = Vec::new();
        for arm in [&adamw, &ivon] {
            let mut c = arm.clone();
            c.seed = seed;
            c.out_dir = work.join(format!("{}-seed{seed}", c.optimizer.kind));
            let run = harness::finetune_any(&c, &FinetuneOptions::default()).map_err(|e| e.to_string())?;
            runs.push((c, run));
        }
        let (ivon_cfg, ivon_run) = runs.pop().unwrap();
        let (_, adamw_run) = runs.pop().unwrap();
        let sweep = harness::tau_sweep_any(&ivon_cfg, &ivon_run, &ivon_cfg.eval.tau_grid, ivon_cfg.eval.samples)
            .map_err(|e| e.to_string())?;
        let aw = adamw_run.final_metrics("mean").ok_or("adamw run has no mean metrics")?;
        let im = ivon_run.final_metrics("mean").ok_or("ivon run has no mean metrics")?;
        let ie = ensemble_metrics(&ivon_run).ok_or("ivon run has no ensemble metrics")?;
        eprintln!(
            "  seed {seed}: AdamW acc {:.4} ece {:.4} nll {:.4} | IVON@mean acc {:.4} ece {:.4} nll {:.4} | IVON acc {:.4} ece {:.4} nll {:.4} ({:.0}s elapsed)",
            aw.acc, aw.ece, aw.nll, im.acc, im.ece, im.nll, ie.acc, ie.ece, ie.nll,
            t.elapsed().as_secs_f64()
        );
        seeds.push(SeedResult {
            seed,
            adamw: adamw_run,
            ivon: ivon_run,
            sweep,
        });
    }
    Ok(Replication {
        seeds,
        secs: t.elapsed().as_secs_f64(),
        configs: (adamw, ivon),
    })
}

// 6
fn directional_replication(rep: &Replication) -> Check {
    let mut ece_red = Vec::new();
    let mut acc_diff = Vec::new();
    let mut nll_wins = 0;
    for s in &rep.seeds {
        let aw = s.adamw.final_metrics("mean").unwrap();
        let im = s.ivon.final_metrics("mean").unwrap();
        let ie = ensemble_metrics(&s.ivon).unwrap();
        ece_red.push((aw.ece - ie.ece) / aw.ece);
        acc_diff.push(im.acc - aw.acc);
        if ie.nll < aw.nll {
            nll_wins += 1;
        }
    }
    let (red, diff) = (median(&ece_red), median(&acc_diff));
    let n = rep.seeds.len();
    let detail = format!(
        "median ECE reduction {:.1}% (>= 20%), IVON NLL lower in {nll_wins}/{n} seeds, median IVON@mean - AdamW acc {:+.2} pt (>= -0.5), {:.0}s (< 1800s)",
        100.0 * red,
        100.0 * diff,
        rep.secs
    );
    ensure(red >= 0.2 && nll_wins == n && diff >= -0.005 && rep.secs < 1800.0, detail)
}

// 7
fn tau_trend(rep: &Replication) -> Check {
    let grid = &rep.configs.1.eval.tau_grid;
    let at = |s: &SeedResult, tau: f64| s.sweep.iter().find(|r| r.tau == tau).cloned();
    let mut endpoints = true;
    let (mut nll0, mut nll1, mut err0, mut err1) = (vec![], vec![], vec![], vec![]);
    for s in &rep.seeds {
        let (Some(r0), Some(r1)) = (at(s, 0.0), at(s, 1.0)) else {
            return Err(format!("grid {grid:?} lacks an endpoint"));
        };
        let m = s.ivon.final_metrics("mean").unwrap();
        let e = ensemble_metrics(&s.ivon).unwrap();
        endpoints &= (r0.acc, r0.ece, r0.nll, r0.brier) == (m.acc, m.ece, m.nll, m.brier);
        endpoints &= (r1.acc, r1.ece, r1.nll, r1.brier) == (e.acc, e.ece, e.nll, e.brier);
        nll0.push(r0.nll);
        nll1.push(r1.nll);
        err0.push(1.0 - r0.acc);
        err1.push(1.0 - r1.acc);
        let line: Vec<String> = s.sweep.iter().map(|r| format!("{}:{:.4}/{:.2}%", r.tau, r.nll, 100.0 * (1.0 - r.acc))).collect();
        eprintln!("  seed {} tau nll/err: {}", s.seed, line.join(" "));
    }
    let (n0, n1, e0, e1) = (median(&nll0), median(&nll1), median(&err0), median(&err1));
    ensure(
        n1 < n0 && e1 >= e0 - 0.002 && endpoints,
        format!(
            "median NLL tau=0 {n0:.4} -> tau=1 {n1:.4}; median error {:.2}% -> {:.2}% (>= -0.2 pt); endpoints exact: {endpoints}",
            100.0 * e0,
            100.0 * e1
        ),
    )
}

// 8
fn overhead_property() -> Check {
    let cfg = with_kind(&desk_config(), OptimizerKind::Ivon);
    let mut params = Vec::new();
    let mut overhead = Vec::new();
    for r in [2, 8, 32] {
        let mut c = cfg.clone();
        c.model.lora.rank = r;
        let rep = profile_timing::<f32>(&c, 10, 60).map_err(|e| e.to_string())?;
        params.push(rep.trainable_params as f64);
        overhead.push(rep.sample_ms.mean_ms + rep.opt_step_ms.mean_ms);
    }
    let r2 = harness::timing::linear_fit_r2(&params, &overhead);

    let mut by_batch = Vec::new();
    for b in [2, 32] {
        let mut c = cfg.clone();
        c.finetune.batch_size = b;
        let rep = profile_timing::<f32>(&c, 10, 60).map_err(|e| e.to_string())?;
        by_batch.push((rep.fwd_bwd_ms.mean_ms, rep.sample_ms.mean_ms + rep.opt_step_ms.mean_ms, rep.overhead_ratio()));
    }
    let fwd_ratio = by_batch[1].0 / by_batch[0].0;
    let ovh_ratio = by_batch[1].1 / by_batch[0].1;
    ensure(
        r2 > 0.95 && fwd_ratio > 4.0 && (ovh_ratio - 1.0).abs() < 0.25,
        format!(
            "sample+opt vs params R^2 {r2:.4} (> 0.95) over {params:?}; batch 2 -> 32 scales fwd/bwd x{fwd_ratio:.1} but sample+opt x{ovh_ratio:.2}; overhead ratio at batch 32 {:.2}%",
            100.0 * by_batch[1].2
        ),
    )
}

// 9
fn reproducibility(work: &Path) -> Check {
    let mut detail = Vec::new();
    for kind in ["ivon", "adamw"] {
        let dir = work.join(kind);
        let mut cfg = tiny::with_base(&dir, kind);
        let a = run_finetune::<f64>(&cfg, &FinetuneOptions::default()).map_err(|e| e.to_string())?;
        let first = cfg.out_dir.clone();
        cfg.out_dir = dir.join("rerun");
        run_finetune::<f64>(&cfg, &FinetuneOptions::default()).map_err(|e| e.to_string())?;
        let read = |p: PathBuf| fs::read(&p).map_err(|e| format!("{}: {e}", p.display()));
        let same_jsonl = read(first.join(METRICS_FILE))? == read(cfg.out_dir.join(METRICS_FILE))?;

        let bytes = read(a.checkpoint.clone())?;
        let copy = dir.join("copy.ckpt");
        harness::Checkpoint::load(&a.checkpoint)
            .and_then(|c| c.save(&copy))
            .map_err(|e| e.to_string())?;
        let roundtrip = bytes == read(copy)?;

        cfg.out_dir = dir.join("resumed");
        let opts = FinetuneOptions {
            resume: Some(first.join("step-20.ckpt")),
            verbose: false,
        };
        run_finetune::<f64>(&cfg, &opts).map_err(|e| e.to_string())?;
        let resumed = read(first.join(METRICS_FILE))? == read(cfg.out_dir.join(METRICS_FILE))?
            && tiny::canonical_checkpoint(&first.join(FINAL_CHECKPOINT))
                == tiny::canonical_checkpoint(&cfg.out_dir.join(FINAL_CHECKPOINT));
        if !(same_jsonl && roundtrip && resumed) {
            return Err(format!("{kind}: rerun jsonl {same_jsonl}, save/load bytes {roundtrip}, resume {resumed}"));
        }
        detail.push(kind);
    }
    Ok(format!("{}: identical rerun JSONL, byte-identical save/load, midpoint resume exact", detail.join(", ")))
}

// 10
fn drop_in_contract(rep: Option<&Replication>) -> Check {
    let desk = desk_config();
    let a = with_kind(&desk, OptimizerKind::Adamw).to_toml_string();
    let b = with_kind(&desk, OptimizerKind::Ivon).to_toml_string();
    let (la, lb): (Vec<&str>, Vec<&str>) = (a.lines().collect(), b.lines().collect());
    if la.len() != lb.len() {
        return Err(format!("configs differ in length: {} vs {} lines", la.len(), lb.len()));
    }
    let diff: Vec<(&str, &str)> = la.iter().zip(&lb).filter(|(x, y)| x != y).map(|(x, y)| (*x, *y)).collect();
    let only_kind = diff == [(r#"kind = "adamw""#, r#"kind = "ivon""#)];
    let mut detail = format!("diff: {diff:?}");
    if let Some(rep) = rep {
        // the replication ran exactly these two configs, up to seed and paths
        let norm = |c: &ExperimentConfig| {
            let mut c = c.clone();
            c.seed = 0;
            c.out_dir = PathBuf::new();
            c.finetune.base_checkpoint = PathBuf::new();
            c.to_toml_string()
        };
        let used = rep.seeds.iter().all(|s| {
            norm(&s.adamw.config) == norm(&with_kind(&desk, OptimizerKind::Adamw))
                && norm(&s.ivon.config) == norm(&with_kind(&desk, OptimizerKind::Ivon))
        });
        detail.push_str(&format!("; replication runs used these configs: {used}"));
        return ensure(only_kind && used, detail);
    }
    ensure(only_kind, detail)
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let enabled = |i: usize| only.as_ref().map_or(true, |o| o.contains(&i));
    let work = tempfile::tempdir().expect("tempdir");

    let mut results: Vec<(usize, &str, Check)> = Vec::new();
    let mut record = |i: usize, name: &'static str, f: &mut dyn FnMut() -> Check| {
        if !enabled(i) {
            return;
        }
        let t = Instant::now();
        let r = f();
        let line = match &r {
            Ok(d) => format!("[PASS] {i:>2} {name}: {d} [{:.1}s]", t.elapsed().as_secs_f64()),
            Err(d) => format!("[FAIL] {i:>2} {name}: {d} [{:.1}s]", t.elapsed().as_secs_f64()),
        };
        println!("{line}");
        results.push((i, name, r));
    };

    record(1, "gradient correctness", &mut gradient_correctness);
    record(2, "conjugate-posterior convergence", &mut conjugate_convergence);
    record(3, "Hessian-estimator unbiasedness", &mut hessian_unbiasedness);
    record(4, "degenerate identities", &mut degenerate_identities);
    record(5, "metrics oracle equivalence", &mut metrics_oracle);

    let replication = if enabled(6) || enabled(7) {
        Some(replicate(&work.path().join("desk")))
    } else {
        None
    };
    let rep_ok = replication.as_ref().and_then(|r| r.as_ref().ok());
    let rep_err = |r: &Option<Result<Replication, String>>| match r {
        Some(Err(e)) => Err(format!("replication runs failed: {e}")),
        _ => Err("replication not run".to_string()),
    };
    record(6, "directional replication", &mut || match rep_ok {
        Some(rep) => directional_replication(rep),
        None => rep_err(&replication),
    });
    record(7, "tau-interpolation trend", &mut || match rep_ok {
        Some(rep) => tau_trend(rep),
        None => rep_err(&replication),
    });
    record(8, "overhead property", &mut overhead_property);
    record(9, "reproducibility and persistence", &mut || reproducibility(&work.path().join("repro")));
    record(10, "drop-in contract", &mut || drop_in_contract(rep_ok));

    let failed = results.iter().filter(|(_, _, r)| r.is_err()).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
