//! Seeded random streams for model construction and scene generation.
//!
//! Every stream is a SplitMix64 generator (state = seed, Steele/Lea/Flood
//! output mix). Sub-streams are split off deterministically with
//! [`Stream::fork`], so a consumer can regenerate any single part (one
//! layer's weights, one scene) without replaying the rest. Floats and
//! normals are derived as documented on each method, which keeps the output
//! reproducible from any language with 64-bit integer arithmetic.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone)]
pub struct Stream(SplitMix64);

impl Stream {
    pub fn new(seed: u64) -> Self {
        Self(SplitMix64::seed_from_u64(seed))
    }

    /// Child stream seeded with `next_u64() ^ (label * GOLDEN_GAMMA)`.
    pub fn fork(&mut self, label: u64) -> Stream {
        Stream::new(self.next_u64() ^ label.wrapping_mul(GOLDEN_GAMMA))
    }

    /// Child stream keyed only by `(seed, label)`, independent of how much of
    /// any other stream has been consumed.
    pub fn keyed(seed: u64, label: u64) -> Stream {
        Stream::new(seed).fork(label)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform in `[0, 1)`: top 53 bits of the next output times `2^-53`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box–Muller, cosine branch only:
    /// `sqrt(-2 ln(1 - u1)) * cos(2π u2)`.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Integer in `0..n` by multiply-shift on the next output.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Fisher–Yates, walking from the back.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
