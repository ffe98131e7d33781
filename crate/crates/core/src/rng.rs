//! Named, seeded random streams.
//!
//! Every consumer of randomness (subset sampling, augmentation, weight
//! initialisation, dropout masks) draws from its own stream keyed by
//! `(seed, stream_id)`. The key is hashed with SHA-256 into a ChaCha8 seed so
//! streams are stable across platforms and crate versions, and deriving a child
//! stream (for example per epoch) needs no mutable state. That is what makes
//! interrupted runs resumable bit-exactly.

use std::fmt;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

pub struct RngHandle {
    seed: u64,
    stream_id: String,
    inner: ChaCha8Rng,
}

/// Opens the stream identified by `(seed, stream_id)`.
pub fn seeded_rng(seed: u64, stream_id: &str) -> RngHandle {
    let mut hasher = Sha256::new();
    hasher.update(b"depthadapt-rng-v1");
    hasher.update(seed.to_le_bytes());
    hasher.update((stream_id.len() as u64).to_le_bytes());
    hasher.update(stream_id.as_bytes());
    let key: [u8; 32] = hasher.finalize().into();
    RngHandle {
        seed,
        stream_id: stream_id.to_owned(),
        inner: ChaCha8Rng::from_seed(key),
    }
}

impl RngHandle {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> &str {
        &self.stream_id
    }

    /// A fresh child stream `"{stream_id}/{label}"`, independent of how many
    /// draws were already taken from `self`.
    pub fn derive(&self, label: impl fmt::Display) -> RngHandle {
        seeded_rng(self.seed, &format!("{}/{}", self.stream_id, label))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        if hi <= lo {
            return lo;
        }
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// `n` distinct indices drawn uniformly without replacement from `0..len`.
    pub fn sample_indices(&mut self, len: usize, n: usize) -> Vec<usize> {
        rand::seq::index::sample(&mut self.inner, len, n).into_vec()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }
}

impl fmt::Debug for RngHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RngHandle")
            .field("seed", &self.seed)
            .field("stream_id", &self.stream_id)
            .finish_non_exhaustive()
    }
}
