//! Named-stream seeded randomness.
//!
//! Every random choice in the pipeline derives from a single 64-bit root
//! seed through named streams, so independent stages (scene sampling,
//! weight init, epoch shuffles) can be reordered or parallelized without
//! changing each other's draws. Identical seeds give bit-identical runs.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

/// A derivation point in the seed tree. Copyable and cheap; call
/// [`SeedKey::rng`] at the leaves to obtain an actual generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedKey(u64);

impl SeedKey {
    pub fn new(seed: u64) -> Self {
        SeedKey(splitmix64(seed))
    }

    /// Derives a child key for a named stream.
    pub fn stream(self, name: &str) -> SeedKey {
        SeedKey(splitmix64(self.0 ^ fnv1a64(name.as_bytes())))
    }

    /// Derives a child key for the i-th item of a stream.
    pub fn index(self, i: u64) -> SeedKey {
        SeedKey(splitmix64(self.0 ^ i.wrapping_mul(0x9e37_79b9_7f4a_7c15)))
    }

    pub fn rng(self) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(self.0)
    }

    pub fn raw(self) -> u64 {
        self.0
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Standard normal draw scaled by `sigma`.
pub fn normal(rng: &mut ChaCha12Rng, sigma: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    z * sigma
}

/// Uniform draw in `[lo, hi)`.
pub fn uniform(rng: &mut ChaCha12Rng, lo: f64, hi: f64) -> f64 {
    rng.gen_range(lo..hi)
}

/// Samples an index from a discrete probability table.
pub fn categorical(rng: &mut ChaCha12Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.gen_range(0.0..1.0);
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Deterministic in-place Fisher-Yates shuffle.
pub fn shuffle<T>(rng: &mut ChaCha12Rng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}
