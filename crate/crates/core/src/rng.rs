//! Seed derivation. Every stochastic component draws from a ChaCha stream
//! keyed by `(master seed, purpose, index)` so runs are reproducible
//! regardless of evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finaliser.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    mix64(mix64(master ^ mix64(stream)) ^ index)
}

pub fn stream_rng(master: u64, stream: u64, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(master, stream, index))
}

/// Stream identifiers. Fixed constants so that adding a stream never
/// perturbs the others.
pub mod streams {
    pub const SCENE: u64 = 1;
    pub const CROP_CORPUS: u64 = 2;
    pub const INIT: u64 = 3;
    pub const BATCH: u64 = 4;
    pub const AUGMENT: u64 = 5;
    pub const QUEUE: u64 = 6;
    pub const JITTER: u64 = 7;
    pub const ROI_SAMPLING: u64 = 8;
    pub const ORACLE_NOISE: u64 = 9;
    pub const PRETRAIN: u64 = 10;
}
