//! Seed derivation.
//!
//! Every random stream in the crate is keyed by `(seed, purpose tag, index)`.
//! The tag is hashed with FNV-1a and folded into the seed with SplitMix64
//! finalizers, so streams for different purposes or item indices never
//! depend on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(tag: &str) -> u64 {
    tag.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Derive a child seed for `(seed, tag, index)`.
pub fn derive(seed: u64, tag: &str, index: u64) -> u64 {
    let a = splitmix64(seed ^ fnv1a(tag));
    splitmix64(a ^ splitmix64(index.wrapping_add(0xA076_1D64_78BD_642F)))
}

/// Seeded generator for `(seed, tag, index)`.
pub fn rng(seed: u64, tag: &str, index: u64) -> Rng {
    Rng::seed_from_u64(derive(seed, tag, index))
}
