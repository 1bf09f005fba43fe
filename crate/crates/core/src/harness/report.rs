//! Aggregates finished runs over seeds into a method-by-metric table.

use serde::{Deserialize, Serialize};

use super::RunRecord;
use crate::optim::OptimizerKind;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 {
            xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub seeds: usize,
    pub acc: MeanStd,
    pub ece: MeanStd,
    pub nll: MeanStd,
    pub brier: MeanStd,
}

fn method_name(kind: OptimizerKind, mode: &str) -> String {
    let family = mode.split('(').next().unwrap_or(mode);
    match (kind, family) {
        (OptimizerKind::Adamw, "mean") => "AdamW".into(),
        (OptimizerKind::Adamw, "mc_dropout") => "MC Dropout".into(),
        (OptimizerKind::Ivon, "mean") => "IVON@mean".into(),
        (OptimizerKind::Ivon, "ensemble") => "IVON".into(),
        (OptimizerKind::Ivon, "mc_dropout") => "IVON+MC Dropout".into(),
        (k, f) => format!("{k}/{f}"),
    }
}

/// One row per (optimizer, prediction mode) seen in the runs' final test
/// metrics, averaged over runs. Rows keep first-seen order.
pub fn aggregate(runs: &[RunRecord]) -> Vec<SummaryRow> {
    let mut groups: Vec<(String, Vec<[f64; 4]>)> = Vec::new();
    for run in runs {
        for r in &run.final_test {
            let name = method_name(run.optimizer, &r.mode);
            let m = &r.metrics;
            let vals = [m.acc, m.ece, m.nll, m.brier];
            match groups.iter_mut().find(|(n, _)| *n == name) {
                Some((_, v)) => v.push(vals),
                None => groups.push((name, vec![vals])),
            }
        }
    }
    groups
        .into_iter()
        .map(|(method, vals)| {
            let col = |i: usize| MeanStd::of(&vals.iter().map(|v| v[i]).collect::<Vec<_>>());
            SummaryRow {
                method,
                seeds: vals.len(),
                acc: col(0),
                ece: col(1),
                nll: col(2),
                brier: col(3),
            }
        })
        .collect()
}

/// Markdown table; accuracy and ECE in percent.
pub fn format_table(rows: &[SummaryRow]) -> String {
    let mut s = String::from("| Method | Seeds | ACC (%) ↑ | ECE (%) ↓ | NLL ↓ | Brier ↓ |\n|---|---|---|---|---|---|\n");
    for r in rows {
        s += &format!(
            "| {} | {} | {:.1} ± {:.1} | {:.1} ± {:.1} | {:.3} ± {:.3} | {:.3} ± {:.3} |\n",
            r.method,
            r.seeds,
            100.0 * r.acc.mean,
            100.0 * r.acc.std,
            100.0 * r.ece.mean,
            100.0 * r.ece.std,
            r.nll.mean,
            r.nll.std,
            r.brier.mean,
            r.brier.std
        );
    }
    s
}
