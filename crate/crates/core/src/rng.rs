//! Seed derivation. Every random stream in the crate is keyed by the run
//! seed plus a short path of integers, so nothing depends on draw order
//! across unrelated components.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix(seed), |acc, &p| splitmix(acc ^ splitmix(p)))
}

pub fn rng_for(seed: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, path))
}

/// Stream tags.
pub mod purpose {
    pub const CORPUS: u64 = 1;
    pub const INIT: u64 = 2;
    pub const ORDER: u64 = 3;
    pub const SCENE: u64 = 4;
    pub const MASK: u64 = 5;
    pub const HARD: u64 = 6;
    pub const EVAL: u64 = 7;
    pub const QFVS: u64 = 8;
}
