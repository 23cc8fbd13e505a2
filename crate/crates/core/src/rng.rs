//! Per-episode random streams.
//!
//! Every episode draws from its own xoshiro256** generator whose 256-bit state
//! is the SplitMix64 expansion of `seed ^ episode_index`. The two sampling
//! helpers below are the only ways the simulator consumes randomness, so a
//! trace can be reproduced by any implementation that follows the same rules:
//!
//! * `unit`: `(next_u64 >> 11) * 2^-53`, a float in `[0, 1)`;
//! * `pick_index(n)`: the high 64 bits of `next_u64 * n`.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

/// Random stream dedicated to one episode of an experiment.
#[derive(Debug, Clone)]
pub struct EpisodeRng(Xoshiro256StarStar);

impl EpisodeRng {
    pub fn for_episode(seed: u64, episode_index: u64) -> Self {
        Self(Xoshiro256StarStar::seed_from_u64(seed ^ episode_index))
    }
}

impl RngCore for EpisodeRng {
    fn next_u32(&mut self) -> u32 {
        self.0.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.0.fill_bytes(dst)
    }
}

/// Uniform float in `[0, 1)` built from the top 53 bits of one draw.
pub fn unit<R: RngCore + ?Sized>(rng: &mut R) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Index in `0..n` from one draw (multiply-high, no rejection).
pub fn pick_index<R: RngCore + ?Sized>(rng: &mut R, n: usize) -> usize {
    debug_assert!(n > 0);
    ((rng.next_u64() as u128 * n as u128) >> 64) as usize
}
