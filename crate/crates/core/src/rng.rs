//! Seed derivation. Every random decision in the pipeline draws from a
//! ChaCha8 stream keyed by a base seed plus a path of integers (epoch,
//! record index, ...), so work can be reordered or parallelized without
//! changing results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng_for(base: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, path))
}

/// Stream tags keep independent uses of the same seed apart.
pub mod stream {
    pub const SPLIT: u64 = 1;
    pub const INIT: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const MASK: u64 = 4;
    pub const VAL_MASK: u64 = 5;
    pub const SUBSAMPLE: u64 = 6;
    pub const HEAD_INIT: u64 = 7;
    pub const SYNTH: u64 = 8;
}
