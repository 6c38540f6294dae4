//! Seeded, splittable random streams.
//!
//! Every stream is a ChaCha12 generator keyed by the top-level seed and a
//! 64-bit stream id. ChaCha streams with different ids never overlap (each
//! stream has 2^64 blocks of 16 words), so replications that draw from
//! derived sub-streams are independent of scheduling order.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    inner: ChaCha12Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// FNV-1a; stable across platforms and releases, unlike `DefaultHasher`.
fn label_hash(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha12Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Child stream named by `label`. Depends only on (seed, stream id,
    /// label), never on how many draws the parent has made.
    pub fn derive(&self, label: &str) -> RngStream {
        let id = splitmix64(self.stream_id ^ splitmix64(label_hash(label)));
        Self::with_stream(self.seed, id)
    }

    /// Child stream keyed by an integer, e.g. a replication index.
    pub fn derive_index(&self, index: u64) -> RngStream {
        let id =
            splitmix64(self.stream_id.rotate_left(17) ^ splitmix64(index ^ 0xA5A5_5A5A_0F0F_F0F0));
        Self::with_stream(self.seed, id)
    }

    /// Follows a slash-separated path such as `"bandit/rep/17/arm/0"`.
    /// Purely numeric components are treated as indices.
    pub fn fork(&self, path: &str) -> RngStream {
        path.split('/')
            .filter(|p| !p.is_empty())
            .fold(self.clone(), |acc, part| match part.parse::<u64>() {
                Ok(i) => acc.derive_index(i),
                Err(_) => acc.derive(part),
            })
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        mean + std * self.standard_normal()
    }

    /// Uniform on [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, low: f64, high: f64) -> f64 {
        low + (high - low) * self.uniform()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Fisher-Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            p.swap(i, j);
        }
        p
    }

    /// Draws an index from a probability vector.
    pub fn categorical(&mut self, probs: &[f64]) -> usize {
        let u = self.uniform();
        let mut acc = 0.0;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        // rounding left u above the cumulative sum; return the last nonzero bucket
        probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}
