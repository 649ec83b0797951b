//! Seed derivation shared by every randomized stage.
//!
//! All randomness flows from a single run seed. Child seeds are derived
//! by folding a path of integers (step, sample index, ...) through the
//! splitmix64 finalizer, and each child drives its own ChaCha8 stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SeededRng = ChaCha8Rng;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `derive_seed(s, &[a, b])` = `splitmix64(splitmix64(splitmix64(s) ^ a) ^ b)`.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ p))
}

pub fn rng_from(seed: u64, path: &[u64]) -> SeededRng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, path))
}
