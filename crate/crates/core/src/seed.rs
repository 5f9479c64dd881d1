//! Stable seed derivation so that Monte-Carlo cells and grid points get
//! independent generators regardless of scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds a list of words into one seed. Order matters.
pub fn derive(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x6a09_e667_f3bc_c908, |acc, &p| mix64(acc ^ mix64(p)))
}

/// Seed for one Monte-Carlo cell: `(base seed, sweep value, trial index)`.
pub fn trial_seed(seed: u64, sweep_value: f64, trial: usize) -> u64 {
    derive(&[seed, sweep_value.to_bits(), trial as u64])
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
