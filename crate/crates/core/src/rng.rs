//! Run-level pseudo random stream.
//!
//! Every run owns exactly one [`RunRng`], a xoshiro256** generator whose
//! state is expanded from the run seed with splitmix64. Draw order within a
//! run is fixed: model initialization first, then per epoch the
//! training-list shuffle, then any per-batch draws made by a comparator
//! strategy. Strategies that make no draws of their own (baseline,
//! KAKURENBO) therefore consume identical streams.

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

pub type RunRng = Xoshiro256StarStar;

pub fn run_rng(seed: u64) -> RunRng {
    Xoshiro256StarStar::seed_from_u64(seed)
}

/// Derives an independent seed for a sub-stream (Monte-Carlo trial, repeat).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// In-place Fisher–Yates shuffle, walking from the back.
///
/// Draws exactly `len - 1` values from `rng` (none for slices of length
/// 0 or 1).
pub fn shuffle<T, R: Rng + ?Sized>(items: &mut [T], rng: &mut R) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}
