//! Named, counter-based random streams.
//!
//! Every source of randomness in a run (data order, adapter init, dropout,
//! posterior sampling, ensemble members) draws from its own stream keyed by
//! `(seed, name)`. The generator is ChaCha8, whose block counter gives the
//! stream position, so a stream can be saved as `(seed, name, word_pos)` and
//! resumed exactly.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Stable 64-bit FNV-1a hash; stream ids must not depend on std's hasher.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[derive(Clone, Debug)]
pub struct StreamRng {
    seed: u64,
    name: String,
    inner: ChaCha8Rng,
}

/// Serializable position of a [`StreamRng`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamState {
    pub seed: u64,
    pub name: String,
    /// ChaCha word position, stored as a decimal string since it is a u128.
    pub word_pos: String,
}

impl StreamRng {
    pub fn new(seed: u64, name: &str) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(fnv1a(name.as_bytes()));
        Self {
            seed,
            name: name.to_string(),
            inner,
        }
    }

    /// Child stream `"{parent}/{suffix}"` under the same seed.
    pub fn derive(&self, suffix: &str) -> Self {
        Self::new(self.seed, &format!("{}/{}", self.name, suffix))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn state(&self) -> StreamState {
        StreamState {
            seed: self.seed,
            name: self.name.clone(),
            word_pos: self.inner.get_word_pos().to_string(),
        }
    }

    pub fn from_state(state: &StreamState) -> Option<Self> {
        let pos: u128 = state.word_pos.parse().ok()?;
        let mut rng = Self::new(state.seed, &state.name);
        rng.inner.set_word_pos(pos);
        Some(rng)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }

    /// Categorical draw from unnormalized nonnegative weights.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let mut u = self.uniform() * total;
        for (i, &w) in weights.iter().enumerate() {
            if u < w {
                return i;
            }
            u -= w;
        }
        weights.len() - 1
    }
}
