//! Seed streams.
//!
//! Every random consumer draws from its own ChaCha8 generator whose seed is
//! derived from the single run seed and a fixed stream id:
//!
//! ```text
//! stream_seed(seed, id) = splitmix64(seed ^ splitmix64(id))
//! ```
//!
//! `splitmix64` is the standard finalizer (add the golden-ratio increment,
//! then two xor-shift-multiply rounds and a final xor-shift). Streams with
//! different ids are independent for practical purposes, and adding a new
//! consumer never shifts the draws of an existing one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const SYNTH_PROTOTYPES: u64 = 1;
pub const SYNTH_LABELS: u64 = 2;
pub const SYNTH_NOISE: u64 = 3;
pub const SYNTH_FLIPS: u64 = 4;
pub const SYNTH_SPLIT: u64 = 5;
pub const SVM_SHUFFLE: u64 = 6;
pub const SUBSAMPLE: u64 = 7;
pub const CV_FOLDS: u64 = 8;

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream_seed(seed: u64, id: u64) -> u64 {
    splitmix64(seed ^ splitmix64(id))
}

pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, id))
}
