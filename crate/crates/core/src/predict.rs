//! Test-time prediction: at the posterior mean, as a τ-scaled posterior
//! ensemble, or by MC dropout. Ensembles average probabilities, not logits.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::PredictError;
use crate::model::{Mode, TinyTransformer};
use crate::optim::PosteriorSnapshot;
use crate::rng::StreamRng;
use crate::tensor::{softmax_rows, Element};

/// Sequences per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PredictionMode {
    Mean,
    Ensemble { samples: usize, tau: f64 },
    McDropout { samples: usize },
}

impl std::fmt::Display for PredictionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PredictionMode::Mean => write!(f, "mean"),
            PredictionMode::Ensemble { samples, tau } => write!(f, "ensemble(S={samples},tau={tau})"),
            PredictionMode::McDropout { samples } => write!(f, "mc_dropout(S={samples})"),
        }
    }
}

/// Class-probability rows for `n` examples.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveBatch {
    pub probs: Vec<f64>,
    pub num_classes: usize,
    pub labels: Vec<usize>,
    pub mode: PredictionMode,
}

impl PredictiveBatch {
    pub fn new(probs: Vec<f64>, num_classes: usize, labels: Vec<usize>, mode: PredictionMode) -> Result<Self, PredictError> {
        if num_classes == 0 || probs.len() != labels.len() * num_classes {
            return Err(PredictError::BatchLength {
                inputs: probs.len() / num_classes.max(1),
                labels: labels.len(),
            });
        }
        Ok(Self {
            probs,
            num_classes,
            labels,
            mode,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn rows(&self) -> std::slice::Chunks<'_, f64> {
        self.probs.chunks(self.num_classes)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.num_classes..(i + 1) * self.num_classes]
    }

    /// Appends `other`'s rows; the result keeps `self`'s mode tag.
    pub fn concat(&self, other: &PredictiveBatch) -> PredictiveBatch {
        let mut probs = self.probs.clone();
        probs.extend_from_slice(&other.probs);
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        PredictiveBatch {
            probs,
            num_classes: self.num_classes,
            labels,
            mode: self.mode,
        }
    }

    /// One JSON object per example: `probs`, `label`, `mode`.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let mode = self.mode.to_string();
        for (row, &label) in self.rows().zip(&self.labels) {
            let rec = PredictionRecord {
                probs: row.to_vec(),
                label,
                mode: mode.clone(),
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub probs: Vec<f64>,
    pub label: usize,
    pub mode: String,
}

fn check_lengths<T: Element>(model: &TinyTransformer<T>, tokens: &[usize], labels: &[usize]) -> Result<(), PredictError> {
    let n = tokens.len() / model.config().seq_len;
    if n != labels.len() || tokens.len() % model.config().seq_len != 0 {
        return Err(PredictError::BatchLength {
            inputs: n,
            labels: labels.len(),
        });
    }
    Ok(())
}

/// Softmax probabilities of `model` with its trainable parameters set to
/// `params`, for every sequence in `tokens`.
fn member_probs<T: Element>(
    model: &TinyTransformer<T>,
    params: &[f64],
    tokens: &[usize],
    mode: Mode,
    mut dropout: Option<&mut StreamRng>,
) -> Result<Vec<f64>, PredictError> {
    let mut m = model.clone();
    m.set_trainable_flat(params)?;
    let len = m.config().seq_len;
    let k = m.config().num_classes;
    let mut out = Vec::with_capacity(tokens.len() / len * k);
    for chunk in tokens.chunks(EVAL_CHUNK * len) {
        let logits = m.logits(chunk, mode, dropout.as_deref_mut())?;
        let z: Vec<f64> = logits.data().iter().map(|v| v.as_f64()).collect();
        out.extend(softmax_rows(&z, k));
    }
    Ok(out)
}

fn average(members: Vec<Vec<f64>>) -> Vec<f64> {
    let s = members.len() as f64;
    let mut acc = vec![0.0; members[0].len()];
    for m in &members {
        for (a, p) in acc.iter_mut().zip(m) {
            *a += p;
        }
    }
    acc.iter_mut().for_each(|a| *a /= s);
    acc
}

/// Deterministic prediction with parameters at the posterior mean.
pub fn predict_at_mean<T: Element>(
    model: &TinyTransformer<T>,
    post: &PosteriorSnapshot,
    tokens: &[usize],
    labels: &[usize],
) -> Result<PredictiveBatch, PredictError> {
    check_lengths(model, tokens, labels)?;
    let probs = member_probs(model, &post.mean, tokens, Mode::Eval, None)?;
    PredictiveBatch::new(probs, model.config().num_classes, labels.to_vec(), PredictionMode::Mean)
}

/// Average of `samples` softmax outputs, member `i` using parameters drawn
/// from `N(m, diag(τ v))` with stream `rng/member{i}`. LoRA dropout is off.
pub fn predict_ensemble<T: Element>(
    model: &TinyTransformer<T>,
    post: &PosteriorSnapshot,
    tokens: &[usize],
    labels: &[usize],
    samples: usize,
    tau: f64,
    rng: &StreamRng,
) -> Result<PredictiveBatch, PredictError> {
    if samples == 0 {
        return Err(PredictError::EmptyEnsemble);
    }
    if tau < 0.0 || tau.is_nan() {
        return Err(crate::error::OptimError::NegativeTau(tau).into());
    }
    if post.variance.is_none() {
        return Err(PredictError::NoVariance);
    }
    check_lengths(model, tokens, labels)?;
    let mode = PredictionMode::Ensemble { samples, tau };
    let k = model.config().num_classes;
    if tau == 0.0 {
        // every member is the mean
        let probs = member_probs(model, &post.mean, tokens, Mode::Eval, None)?;
        return PredictiveBatch::new(probs, k, labels.to_vec(), mode);
    }
    let members = (0..samples)
        .into_par_iter()
        .map(|i| {
            let mut r = rng.derive(&format!("member{i}"));
            let theta = post.sample(tau, &mut r)?;
            member_probs(model, &theta, tokens, Mode::Eval, None)
        })
        .collect::<Result<Vec<_>, PredictError>>()?;
    PredictiveBatch::new(average(members), k, labels.to_vec(), mode)
}

/// Average of `samples` stochastic passes with adapter dropout active, all
/// at the point parameters `params`.
pub fn mc_dropout_predict<T: Element>(
    model: &TinyTransformer<T>,
    params: &[f64],
    tokens: &[usize],
    labels: &[usize],
    samples: usize,
    rng: &StreamRng,
) -> Result<PredictiveBatch, PredictError> {
    if samples == 0 {
        return Err(PredictError::EmptyEnsemble);
    }
    check_lengths(model, tokens, labels)?;
    let members = (0..samples)
        .into_par_iter()
        .map(|i| {
            let mut r = rng.derive(&format!("member{i}"));
            member_probs(model, params, tokens, Mode::Train, Some(&mut r))
        })
        .collect::<Result<Vec<_>, PredictError>>()?;
    PredictiveBatch::new(
        average(members),
        model.config().num_classes,
        labels.to_vec(),
        PredictionMode::McDropout { samples },
    )
}
