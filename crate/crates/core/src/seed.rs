//! Seed derivation. Every random choice in the engine draws from a ChaCha8
//! stream keyed by a seed derived here, so runs are reproducible.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `parts` into `seed`. Order-sensitive.
pub fn derive(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix64(seed), |acc, p| splitmix64(acc ^ splitmix64(*p)))
}

/// Mixes a label (e.g. a role name) into `seed`.
pub fn derive_str(seed: u64, label: &str) -> u64 {
    label.bytes().fold(splitmix64(seed ^ 0xA5A5), |acc, b| splitmix64(acc ^ b as u64))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform draw in [0, 1) from a derived seed.
pub fn unit(seed: u64) -> f64 {
    use rand::Rng;
    rng(seed).random::<f64>()
}
