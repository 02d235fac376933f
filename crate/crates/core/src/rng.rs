//! Deterministic RNG streams keyed by (seed, tags).
//!
//! Every random draw in training and evaluation comes from a stream derived
//! from the run seed plus a tuple of integers (step, image index, purpose).
//! No generator state needs to be persisted: replaying a step re-derives its
//! streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TAG_VIEWS: u64 = 1;
pub const TAG_BATCH: u64 = 2;
pub const TAG_QUEUE: u64 = 3;
pub const TAG_INIT: u64 = 4;
pub const TAG_CORPUS: u64 = 5;
pub const TAG_EVAL: u64 = 6;
pub const TAG_PROBE: u64 = 7;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let key = tags
        .iter()
        .fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t)));
    ChaCha8Rng::seed_from_u64(key)
}
