//! Keyed random streams.
//!
//! Every random draw in the crate comes from a ChaCha stream whose seed is a
//! hash of `(global seed, key parts...)`. Two streams with the same key are
//! identical; streams with different keys are independent for practical
//! purposes. This makes views reproducible per (epoch, sample, view) and lets
//! a resumed run replay exactly the streams an uninterrupted run would use.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

/// Stream purposes, mixed into the key so that e.g. the weak and strong views
/// of one sample never share randomness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Tag {
    Shape = 1,
    Split = 2,
    LabeledWeak = 3,
    LabeledStrong = 4,
    UnlabeledWeak = 5,
    UnlabeledStrong = 6,
    LabeledOrder = 7,
    UnlabeledOrder = 8,
    Init = 9,
    ShapeKind = 10,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, tag: Tag, parts: &[u64]) -> u64 {
    let mut h = splitmix64(seed ^ 0xA076_1D64_78BD_642F);
    h = splitmix64(h ^ tag as u64);
    for &p in parts {
        h = splitmix64(h ^ p);
    }
    h
}

pub fn stream(seed: u64, tag: Tag, parts: &[u64]) -> Stream {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag, parts))
}
