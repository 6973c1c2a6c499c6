//! Seed derivation for independent, reproducible random streams.
//!
//! Every consumer (phantom generation, shuffling, augmentation, weight
//! init) gets its own ChaCha stream keyed by the run seed plus a path of
//! integers such as `(client, round, epoch)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `seed` with a path of stream identifiers into a new 64-bit seed.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream(seed: u64, path: &[u64]) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, path))
}

/// Stream-kind tags so that e.g. the shuffle stream of client 0 never
/// collides with the phantom stream of partition 0.
pub(crate) mod tag {
    pub const INIT: u64 = 0x01;
    pub const PHANTOM: u64 = 0x02;
    pub const SPLIT: u64 = 0x03;
    pub const EPOCH: u64 = 0x04;
    pub const POOL: u64 = 0x05;
}
