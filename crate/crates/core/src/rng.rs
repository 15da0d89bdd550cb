//! Reproducible random streams keyed by logical indices.
//!
//! Every `(path, agent)` pair owns two independent ChaCha8 streams derived
//! from the run seed: one for Brownian increments, consumed step by step, and
//! one for the initial state. Results therefore depend only on the indices,
//! never on how work is scheduled.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Noise = 0,
    Initial = 1,
}

/// Stream for one `(path, agent, purpose)`.
pub fn stream(seed: u64, path: usize, agent: usize, purpose: Purpose) -> ChaCha8Rng {
    assert!(path < (1 << 32) && agent < (1 << 31), "path or agent index too large for stream id");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((path as u64) << 32) | ((agent as u64) << 1) | purpose as u64);
    rng
}

#[inline]
pub fn normal<R: RngCore>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Uniform on `[0, 1)` with 53 random bits.
#[inline]
pub fn uniform<R: RngCore>(rng: &mut R) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
