//! Seeded, splittable random streams.
//!
//! Algorithm: ChaCha8 (`rand_chacha::ChaCha8Rng`). The 256-bit key is the
//! SplitMix64 expansion of the user seed; each substream uses the same key
//! with its own 64-bit ChaCha stream id, derived by hashing the parent's id
//! with the child key. A substream depends only on `(seed, path of keys)`,
//! never on how much the parent has already drawn, so parallel work keyed by
//! replication, pair or chunk is reproducible under any scheduling.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(GOLDEN);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn mix(path: u64, key: u64) -> u64 {
    let mut s = path ^ key.wrapping_mul(GOLDEN).rotate_left(17);
    splitmix64(&mut s) ^ splitmix64(&mut s).rotate_left(32)
}

/// Substream keys used by the pipelines.
pub mod keys {
    pub const DATA: u64 = 1;
    pub const KERNEL: u64 = 2;
    pub const REFERENCE: u64 = 3;
    pub const METHOD: u64 = 4;
}

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    path: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self::at(seed, 0)
    }

    fn at(seed: u64, path: u64) -> Self {
        let mut s = seed;
        let mut key = [0u8; 32];
        for chunk in key.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut s).to_le_bytes());
        }
        let mut inner = ChaCha8Rng::from_seed(key);
        inner.set_stream(path);
        RngStream { seed, path, inner }
    }

    /// Independent child stream identified by `key`.
    pub fn substream(&self, key: u64) -> RngStream {
        RngStream::at(self.seed, mix(self.path, key))
    }

    /// Child stream identified by a sequence of keys.
    pub fn substream_path(&self, keys: &[u64]) -> RngStream {
        let path = keys.iter().fold(self.path, |p, &k| mix(p, k));
        RngStream::at(self.seed, path)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform on `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform index in `0..n` (Lemire's nearly-divisionless method on 64 bits).
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0, "index range must be non-empty");
        let n = n as u64;
        loop {
            let x = self.inner.next_u64();
            let m = (x as u128) * (n as u128);
            let low = m as u64;
            if low >= n || low >= n.wrapping_neg() % n {
                return (m >> 64) as usize;
            }
        }
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
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
