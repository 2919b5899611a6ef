//! Derivation of independent, reproducible random streams.
//!
//! Every randomized step draws from its own generator keyed by the run seed
//! plus a purpose tag and the indices that identify the step (round, client,
//! ...). Streams never share state, so adding or reordering draws in one
//! place cannot perturb another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Purpose tags for the streams used across the crate.
pub mod tag {
    pub const SAMPLE_CLIENTS: u64 = 0x5a11_7e00;
    pub const BATCHES: u64 = 0xba7c_0001;
    pub const PARTITION: u64 = 0x9a27_0002;
    pub const MODEL_INIT: u64 = 0x1417_0003;
    pub const SYNTHETIC: u64 = 0x5e7d_0004;
    pub const POPULATION: u64 = 0x909a_0005;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hashes `seed` and `parts` into one 64-bit key.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream(seed: u64, parts: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(seed, parts))
}
