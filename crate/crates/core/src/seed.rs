//! Seed derivation.
//!
//! Every random choice in the toolkit draws from a ChaCha8 stream whose seed is
//! derived with [`seed_mix`] from the global seed and the identifiers of the
//! item being randomized. Per-item streams make results independent of
//! iteration order and of the number of worker threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a global seed with two item identifiers:
/// `splitmix64(splitmix64(splitmix64(global) ^ a) ^ b)`.
pub fn seed_mix(global: u64, a: u64, b: u64) -> u64 {
    let h = splitmix64(global);
    let h = splitmix64(h ^ a);
    splitmix64(h ^ b)
}

/// Domain tags keep the streams of different pipeline stages apart.
pub mod domain {
    pub const SPLIT: u64 = 0x53504c4954;
    pub const ENTAILMENT: u64 = 0x454e5441494c;
    pub const RECOGNITION: u64 = 0x5245434f47;
    pub const CASE_STUDY: u64 = 0x43415345;
    pub const TRAIN: u64 = 0x545241494e;
    pub const SYNTH: u64 = 0x53594e5448;
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
