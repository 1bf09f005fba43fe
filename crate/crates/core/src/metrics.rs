//! Accuracy, expected calibration error, NLL and multiclass Brier score.

use serde::{Deserialize, Serialize};

use crate::error::MetricsError;
use crate::predict::PredictiveBatch;

/// Floor applied to the true-class probability before taking its log.
pub const NLL_FLOOR: f64 = 1e-12;

pub const DEFAULT_BINS: usize = 15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinStat {
    pub count: usize,
    /// Mean confidence of the rows in the bin (0 when empty).
    pub conf: f64,
    /// Fraction of correct rows in the bin (0 when empty).
    pub acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: f64,
    pub ece: f64,
    pub nll: f64,
    pub brier: f64,
    pub n: usize,
    pub bins: Vec<BinStat>,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in row.iter().enumerate().skip(1) {
        if p > row[best] {
            best = i;
        }
    }
    best
}

fn check_nonempty(pred: &PredictiveBatch) -> Result<(), MetricsError> {
    if pred.len() == 0 {
        return Err(MetricsError::EmptyBatch);
    }
    Ok(())
}

pub fn accuracy(pred: &PredictiveBatch) -> Result<f64, MetricsError> {
    check_nonempty(pred)?;
    let correct = pred.rows().zip(&pred.labels).filter(|(r, &y)| argmax(r) == y).count();
    Ok(correct as f64 / pred.len() as f64)
}

/// Confidence `c` falls in bin `floor(c·B)`, with `c = 1` in the last bin.
pub fn bin_index(conf: f64, num_bins: usize) -> usize {
    ((conf * num_bins as f64).floor() as usize).min(num_bins - 1)
}

pub fn reliability_bins(pred: &PredictiveBatch, num_bins: usize) -> Result<Vec<BinStat>, MetricsError> {
    if num_bins == 0 {
        return Err(MetricsError::NoBins);
    }
    let mut count = vec![0usize; num_bins];
    let mut conf_sum = vec![0.0; num_bins];
    let mut correct = vec![0usize; num_bins];
    for (row, &y) in pred.rows().zip(&pred.labels) {
        let k = argmax(row);
        let c = row[k];
        let b = bin_index(c, num_bins);
        count[b] += 1;
        conf_sum[b] += c;
        if k == y {
            correct[b] += 1;
        }
    }
    Ok((0..num_bins)
        .map(|b| {
            if count[b] == 0 {
                BinStat { count: 0, conf: 0.0, acc: 0.0 }
            } else {
                BinStat {
                    count: count[b],
                    conf: conf_sum[b] / count[b] as f64,
                    acc: correct[b] as f64 / count[b] as f64,
                }
            }
        })
        .collect())
}

/// `Σ_b (n_b / n)·|acc_b − conf_b|` over equal-width confidence bins.
pub fn ece(pred: &PredictiveBatch, num_bins: usize) -> Result<f64, MetricsError> {
    check_nonempty(pred)?;
    let bins = reliability_bins(pred, num_bins)?;
    Ok(ece_from_bins(&bins, pred.len()))
}

fn ece_from_bins(bins: &[BinStat], n: usize) -> f64 {
    bins.iter()
        .filter(|b| b.count > 0)
        .map(|b| b.count as f64 / n as f64 * (b.acc - b.conf).abs())
        .sum()
}

/// Mean of `−ln max(p_true, 1e-12)`.
pub fn nll(pred: &PredictiveBatch) -> Result<f64, MetricsError> {
    check_nonempty(pred)?;
    let total: f64 = pred.rows().zip(&pred.labels).map(|(r, &y)| -r[y].max(NLL_FLOOR).ln()).sum();
    Ok(total / pred.len() as f64)
}

/// Mean over rows of `Σ_k (p_k − 1[k = y])²`, not divided by the class count.
pub fn brier(pred: &PredictiveBatch) -> Result<f64, MetricsError> {
    check_nonempty(pred)?;
    let total: f64 = pred
        .rows()
        .zip(&pred.labels)
        .map(|(r, &y)| {
            r.iter()
                .enumerate()
                .map(|(k, &p)| {
                    let t = if k == y { 1.0 } else { 0.0 };
                    (p - t) * (p - t)
                })
                .sum::<f64>()
        })
        .sum();
    Ok(total / pred.len() as f64)
}

pub fn evaluate(pred: &PredictiveBatch, num_bins: usize) -> Result<MetricsReport, MetricsError> {
    check_nonempty(pred)?;
    let bins = reliability_bins(pred, num_bins)?;
    Ok(MetricsReport {
        acc: accuracy(pred)?,
        ece: ece_from_bins(&bins, pred.len()),
        nll: nll(pred)?,
        brier: brier(pred)?,
        n: pred.len(),
        bins,
    })
}
