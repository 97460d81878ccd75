use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Tensor;

/// Stream ids partitioning every random consumer in a run. Draws taken by one
/// consumer never shift the sequence seen by another.
pub mod streams {
    pub const WEIGHT_INIT: u64 = 1;
    pub const DATA_SHUFFLE: u64 = 2;
    pub const HESSIAN_BATCH: u64 = 3;
    pub const SYNTHETIC_DATA: u64 = 4;
    pub const DATA_SUBSET: u64 = 5;

    /// Hutchinson probes for one (pruning event, layer) pair.
    pub fn hutchinson(event: u64, layer: u64) -> u64 {
        (0x4855_u64 << 48) | ((event & 0xFFFF_FFFF) << 16) | (layer & 0xFFFF)
    }
}

/// Counter-based ChaCha8 generator addressed by `(seed, stream id)`.
///
/// ChaCha8 is specified bit-for-bit, so a given pair produces the same
/// sequence on every platform, and distinct stream ids select disjoint
/// keystreams.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, stream, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    /// Uniform draw from `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        let unit: f64 = self.inner.random();
        lo + (hi - lo) * unit
    }

    /// Standard normal draw (Box-Muller).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.inner.random::<f64>();
        let u2: f64 = self.inner.random();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}

/// `n` independent ±1 entries, each sign with probability ½.
pub fn rademacher(rng: &mut RngStream, n: usize) -> Tensor {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let mut bits = rng.next_u64();
        for _ in 0..64.min(n - out.len()) {
            out.push(if bits & 1 == 1 { 1.0 } else { -1.0 });
            bits >>= 1;
        }
    }
    Tensor::from_vec(out)
}
