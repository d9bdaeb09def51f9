//! Reproducible Gaussian increments.
//!
//! Every noise path is a pure function of `(master seed, stream, step)`. The
//! generator is ChaCha8 keyed by the master seed, with the stream index selecting
//! the ChaCha stream and the step index selecting the word position. Each step
//! consumes a fixed number of words, so a stream opened at step `k` replays
//! exactly the increments a stream opened at step 0 would produce from step `k`
//! onward, regardless of how work is scheduled across threads.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Master seed plus stream index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedSpec {
    pub master: u64,
    pub stream: u64,
    /// Negate every increment; pairs a stream with its mirror image.
    #[serde(default)]
    pub antithetic: bool,
}

impl SeedSpec {
    pub fn new(master: u64) -> Self {
        Self { master, stream: 0, antithetic: false }
    }

    pub fn with_stream(master: u64, stream: u64) -> Self {
        Self { master, stream, antithetic: false }
    }

    pub fn mirrored(self) -> Self {
        Self { antithetic: !self.antithetic, ..self }
    }

    /// Stream `stream + index`; ensemble members use consecutive streams.
    pub fn member(&self, index: u64) -> Self {
        Self {
            stream: self.stream.wrapping_add(index),
            ..*self
        }
    }

    /// A derived stream that does not collide with `member` streams in practice.
    pub fn child(&self, key: u64) -> Self {
        Self {
            stream: splitmix64(self.stream ^ splitmix64(key.wrapping_add(0x5851_f42d_4c95_7f2d))),
            ..*self
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Standard normal increments of fixed dimension, one vector per step.
#[derive(Debug, Clone)]
pub struct NoiseStream {
    rng: ChaCha8Rng,
    dim: usize,
    sign: f64,
}

impl NoiseStream {
    /// 32-bit words consumed per step: two u64 per Box-Muller pair.
    fn words_per_step(dim: usize) -> u128 {
        (4 * dim.div_ceil(2)) as u128
    }

    pub fn new(seed: SeedSpec, dim: usize) -> Self {
        Self::at_step(seed, dim, 0)
    }

    /// Stream positioned at the increments of step `step`.
    pub fn at_step(seed: SeedSpec, dim: usize, step: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.master);
        rng.set_stream(seed.stream);
        rng.set_word_pos(step as u128 * Self::words_per_step(dim));
        let sign = if seed.antithetic { -1.0 } else { 1.0 };
        Self { rng, dim, sign }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Fill `out` (length `dim`) with independent N(0,1) draws.
    pub fn fill(&mut self, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim);
        let mut i = 0;
        while i < self.dim {
            let (z0, z1) = self.box_muller();
            out[i] = self.sign * z0;
            if i + 1 < self.dim {
                out[i + 1] = self.sign * z1;
            }
            i += 2;
        }
    }

    fn box_muller(&mut self) -> (f64, f64) {
        // u1 in (0, 1], u2 in [0, 1)
        let u1 = 1.0 - unit_f64(self.rng.next_u64());
        let u2 = unit_f64(self.rng.next_u64());
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = std::f64::consts::TAU * u2;
        (radius * angle.cos(), radius * angle.sin())
    }
}

fn unit_f64(bits: u64) -> f64 {
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
