//! Deterministic derivation of independent random streams from one seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed for the sub-stream `stream` of `seed`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(seed ^ splitmix64(stream.wrapping_add(0x5EED)))
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream))
}

// Named streams.
pub(crate) const PROTOTYPES: u64 = 1;
pub(crate) const PROJECTION: u64 = 2;
pub(crate) const INSTANCES: u64 = 3;
pub(crate) const OBSERVATION: u64 = 4;
pub(crate) const MODEL_INIT: u64 = 10;
pub(crate) const STAGE1: u64 = 11;
pub(crate) const STAGE2: u64 = 12;
pub(crate) const EVAL: u64 = 13;
pub(crate) const SAMPLER: u64 = 14;
pub(crate) const HEAD_REINIT: u64 = 15;
