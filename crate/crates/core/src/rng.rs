//! Deterministic RNG streams.
//!
//! Every stochastic choice in training is drawn from a stream derived from
//! `(master seed, iteration)`, so resuming from a checkpoint reproduces the
//! exact draws of the next iteration without storing RNG state.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic stream for one training iteration.
pub fn iter_rng(seed: u64, iteration: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, iteration.wrapping_add(1)))
}

/// Deterministic stream for parameter initialisation.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, 0))
}

/// Deterministic stream for a named purpose (data generation, sampling).
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, stream))
}

/// SplitMix64-style avalanche of a (seed, stream) pair into one u64.
fn mix(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
