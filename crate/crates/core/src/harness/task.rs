//! Synthetic sequence classification. Each class owns a token profile; a
//! sequence of class `k` draws its tokens i.i.d. from
//! `(1 − signal)·uniform + signal·profile_k`. The finetuning task mixes a
//! fresh profile into every class: `(1 − shift)·P_k + shift·R_k`.

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::model::ModelConfig;
use crate::rng::StreamRng;

pub const GENERATOR: &str = "profile_mixture";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub generator: String,
    pub pretrain_size: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    /// Weight of the fresh profile in the finetuning distribution.
    pub shift: f64,
    /// Weight of the class profile against uniform background tokens.
    pub signal: f64,
    /// Inverse temperature of the random class profiles.
    pub sharpness: f64,
    /// Probability that a finetuning label is replaced by a uniform draw.
    pub label_noise: f64,
    /// Data seed; the run seed when unset.
    pub seed: Option<u64>,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            generator: GENERATOR.into(),
            pretrain_size: 50_000,
            train_size: 200,
            val_size: 200,
            test_size: 2000,
            shift: 0.5,
            signal: 0.35,
            sharpness: 2.0,
            label_noise: 0.0,
            seed: None,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Config(format!("invalid task: {m}")));
        if self.generator != GENERATOR {
            return bad(&format!("unknown generator {:?}", self.generator));
        }
        if [self.pretrain_size, self.train_size, self.val_size, self.test_size].contains(&0) {
            return bad("split sizes must be at least 1");
        }
        for (name, v) in [("shift", self.shift), ("signal", self.signal), ("label_noise", self.label_noise)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(&format!("{name} must lie in [0, 1]"));
            }
        }
        if !(self.sharpness >= 0.0) {
            return bad("sharpness must be nonnegative");
        }
        Ok(())
    }
}

/// Whole sequences stored back to back.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub seq_len: usize,
    pub tokens: Vec<usize>,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sequence(&self, i: usize) -> &[usize] {
        &self.tokens[i * self.seq_len..(i + 1) * self.seq_len]
    }

    /// Gathers the listed examples into a contiguous batch.
    pub fn gather(&self, idx: &[usize]) -> (Vec<usize>, Vec<usize>) {
        let mut tokens = Vec::with_capacity(idx.len() * self.seq_len);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            tokens.extend_from_slice(self.sequence(i));
            labels.push(self.labels[i]);
        }
        (tokens, labels)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneData {
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

/// Per-class token distributions.
#[derive(Clone, Debug, PartialEq)]
pub struct Profiles {
    pub classes: Vec<Vec<f64>>,
}

fn random_profiles(classes: usize, vocab: usize, sharpness: f64, rng: &mut StreamRng) -> Vec<Vec<f64>> {
    (0..classes)
        .map(|_| {
            let z: Vec<f64> = (0..vocab).map(|_| (sharpness * rng.normal()).exp()).collect();
            let s: f64 = z.iter().sum();
            z.iter().map(|v| v / s).collect()
        })
        .collect()
}

impl Profiles {
    pub fn pretrain(spec: &TaskSpec, model: &ModelConfig, seed: u64) -> Self {
        let mut rng = StreamRng::new(seed, "task/profiles");
        Profiles {
            classes: random_profiles(model.num_classes, model.vocab_size, spec.sharpness, &mut rng),
        }
    }

    pub fn finetune(spec: &TaskSpec, model: &ModelConfig, seed: u64) -> Self {
        let base = Self::pretrain(spec, model, seed);
        let mut rng = StreamRng::new(seed, "task/shift_profiles");
        let fresh = random_profiles(model.num_classes, model.vocab_size, spec.sharpness, &mut rng);
        let s = spec.shift;
        Profiles {
            classes: base
                .classes
                .iter()
                .zip(&fresh)
                .map(|(p, r)| p.iter().zip(r).map(|(a, b)| (1.0 - s) * a + s * b).collect())
                .collect(),
        }
    }

    /// Token distribution of class `k` including uniform background.
    pub fn token_dist(&self, k: usize, signal: f64) -> Vec<f64> {
        let v = self.classes[k].len() as f64;
        self.classes[k].iter().map(|p| (1.0 - signal) / v + signal * p).collect()
    }

    fn cumulative(&self, signal: f64) -> Vec<Vec<f64>> {
        (0..self.classes.len())
            .map(|k| {
                let mut acc = 0.0;
                self.token_dist(k, signal)
                    .into_iter()
                    .map(|p| {
                        acc += p;
                        acc
                    })
                    .collect()
            })
            .collect()
    }
}

fn draw_from_cdf(cdf: &[f64], rng: &mut StreamRng) -> usize {
    let u = rng.uniform() * cdf[cdf.len() - 1];
    cdf.partition_point(|&c| c <= u).min(cdf.len() - 1)
}

fn sample_split(
    profiles: &Profiles,
    spec: &TaskSpec,
    seq_len: usize,
    n: usize,
    label_noise: f64,
    rng: &mut StreamRng,
) -> Split {
    let k = profiles.classes.len();
    let cdfs = profiles.cumulative(spec.signal);
    let mut tokens = Vec::with_capacity(n * seq_len);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let class = rng.below(k);
        for _ in 0..seq_len {
            tokens.push(draw_from_cdf(&cdfs[class], rng));
        }
        let label = if label_noise > 0.0 && rng.uniform() < label_noise {
            rng.below(k)
        } else {
            class
        };
        labels.push(label);
    }
    Split { seq_len, tokens, labels }
}

/// Pool for base pretraining, drawn from the unshifted distribution.
pub fn generate_pretrain(spec: &TaskSpec, model: &ModelConfig, seed: u64) -> Result<Split, HarnessError> {
    spec.validate()?;
    let profiles = Profiles::pretrain(spec, model, seed);
    let mut rng = StreamRng::new(seed, "task/pretrain");
    Ok(sample_split(&profiles, spec, model.seq_len, spec.pretrain_size, 0.0, &mut rng))
}

/// Train/validation/test splits of the shifted finetuning task.
pub fn generate_finetune(spec: &TaskSpec, model: &ModelConfig, seed: u64) -> Result<FinetuneData, HarnessError> {
    spec.validate()?;
    let profiles = Profiles::finetune(spec, model, seed);
    let split = |name: &str, n: usize| {
        let mut rng = StreamRng::new(seed, &format!("task/finetune/{name}"));
        sample_split(&profiles, spec, model.seq_len, n, spec.label_noise, &mut rng)
    };
    Ok(FinetuneData {
        train: split("train", spec.train_size),
        val: split("val", spec.val_size),
        test: split("test", spec.test_size),
    })
}

/// Both stages of the task.
pub fn generate_task(spec: &TaskSpec, model: &ModelConfig, seed: u64) -> Result<(Split, FinetuneData), HarnessError> {
    Ok((generate_pretrain(spec, model, seed)?, generate_finetune(spec, model, seed)?))
}

/// Examples visited at `step`: consecutive slices of per-epoch permutations
/// of `0..n`, so any step's batch is computable without replaying earlier
/// ones.
pub fn batch_indices(order: &StreamRng, n: usize, batch: usize, step: u64) -> Vec<usize> {
    let start = step as usize * batch;
    let mut out = Vec::with_capacity(batch);
    let mut epoch = usize::MAX;
    let mut perm = Vec::new();
    for pos in start..start + batch {
        let e = pos / n;
        if e != epoch {
            epoch = e;
            perm = (0..n).collect();
            order.derive(&format!("epoch{e}")).shuffle(&mut perm);
        }
        out.push(perm[pos % n]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (TaskSpec, ModelConfig) {
        let spec = TaskSpec {
            pretrain_size: 300,
            train_size: 20,
            val_size: 10,
            test_size: 50,
            ..TaskSpec::default()
        };
        let model = ModelConfig {
            seq_len: 8,
            ..ModelConfig::default()
        };
        (spec, model)
    }

    #[test]
    fn same_seed_same_splits() {
        let (spec, model) = small();
        assert_eq!(generate_task(&spec, &model, 4).unwrap(), generate_task(&spec, &model, 4).unwrap());
        assert_ne!(
            generate_finetune(&spec, &model, 4).unwrap(),
            generate_finetune(&spec, &model, 5).unwrap()
        );
    }

    #[test]
    fn zero_shift_is_the_pretrain_distribution() {
        let (spec, model) = small();
        let spec = TaskSpec { shift: 0.0, ..spec };
        assert_eq!(Profiles::pretrain(&spec, &model, 1), Profiles::finetune(&spec, &model, 1));
        let shifted = TaskSpec { shift: 0.5, ..spec };
        assert_ne!(Profiles::pretrain(&shifted, &model, 1), Profiles::finetune(&shifted, &model, 1));
    }

    #[test]
    fn split_shapes_and_ranges() {
        let (spec, model) = small();
        let d = generate_finetune(&spec, &model, 2).unwrap();
        assert_eq!(d.train.len(), 20);
        assert_eq!(d.test.tokens.len(), 50 * 8);
        assert!(d.test.tokens.iter().all(|&t| t < model.vocab_size));
        assert!(d.test.labels.iter().all(|&y| y < model.num_classes));
    }

    #[test]
    fn token_dists_are_distributions() {
        let (spec, model) = small();
        let p = Profiles::finetune(&spec, &model, 3);
        for k in 0..model.num_classes {
            let d = p.token_dist(k, spec.signal);
            assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let (spec, model) = small();
        assert!(generate_finetune(&TaskSpec { train_size: 0, ..spec.clone() }, &model, 0).is_err());
        assert!(generate_finetune(&TaskSpec { shift: 1.5, ..spec.clone() }, &model, 0).is_err());
        assert!(generate_finetune(&TaskSpec { generator: "x".into(), ..spec }, &model, 0).is_err());
    }

    #[test]
    fn batches_cover_each_epoch_once() {
        let order = StreamRng::new(0, "order");
        let mut seen: Vec<usize> = (0..5).flat_map(|s| batch_indices(&order, 10, 2, s)).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(batch_indices(&order, 10, 3, 7), batch_indices(&order, 10, 3, 7));
    }
}
