//! Deterministic, counter-addressed randomness.
//!
//! Every random event in training draws from a generator seeded by
//! (master seed, stream tag, event counter). Replaying any event only needs
//! those three integers, so checkpoints persist plain counters instead of
//! generator internals, and a resumed run continues the exact sequence.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::scalar::Scalar;

/// Stream tags. Each independent source of randomness in the system owns a
/// tag so counters never collide across uses.
pub mod streams {
    /// Parameter initialization (counter: per-network index).
    pub const INIT: u64 = 1;
    /// Episode/environment content (counter: episode index).
    pub const EPISODE: u64 = 2;
    /// Latent actions during rollouts (counter: env step index).
    pub const ROLLOUT_LATENT: u64 = 3;
    /// Replay minibatch index draws (counter: gradient step index).
    pub const REPLAY_SAMPLE: u64 = 4;
    /// Reparameterization noise in updates (counter: gradient step index).
    pub const UPDATE_LATENT: u64 = 5;
    /// Held-out evaluation content (counter: eval episode index).
    pub const EVAL: u64 = 6;
    /// Dataset shuffling/splits (counter: 0).
    pub const DATASET: u64 = 7;
}

/// splitmix64 step.
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Collapse (master, stream, counter) into one well-mixed 64-bit seed.
pub fn mix(master: u64, stream: u64, counter: u64) -> u64 {
    let a = splitmix(master);
    let b = splitmix(a ^ stream.wrapping_mul(0xa076_1d64_78bd_642f));
    splitmix(b ^ counter.wrapping_mul(0xe703_7ed1_a0b4_28db))
}

/// Generator for one addressed event.
pub fn event_rng(master: u64, stream: u64, counter: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(master, stream, counter))
}

/// n independent standard-normal draws.
pub fn normal_vec<S: Scalar>(rng: &mut ChaCha8Rng, n: usize) -> Vec<S> {
    (0..n)
        .map(|_| S::from_f64_c(rng.sample::<f64, _>(StandardNormal)))
        .collect()
}

/// n independent draws from U(-bound, bound).
pub fn uniform_vec<S: Scalar>(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<S> {
    (0..n)
        .map(|_| S::from_f64_c(rng.gen_range(-bound..bound)))
        .collect()
}
