//! Deterministic random streams.
//!
//! Every chain, instance and pass draws from its own stream derived from the
//! run seed and a tuple of tags, so results do not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed derived from `seed` and an ordered list of tags.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn stream(seed: u64, tags: &[u64]) -> Stream {
    Stream::seed_from_u64(derive_seed(seed, tags))
}
