// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded randomness.
//!
//! Every random draw in the crate comes from [`ChaCha8Rng`], a counter-based
//! generator: the ChaCha8 block function applied to a (key, stream, counter)
//! triple. The 64-bit user seed becomes the key via `seed_from_u64`, and
//! independent sub-streams are selected with [`derive`], which mixes a purpose
//! label into the key with SplitMix64 and sets the ChaCha stream id.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use rand_chacha::ChaCha8Rng as LabRng;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable 64-bit hash of a purpose label (FNV-1a).
fn label_hash(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Sub-seed for `(seed, label, index)`.
pub fn sub_seed(seed: u64, label: &str, index: u64) -> u64 {
    mix64(mix64(seed ^ label_hash(label)).wrapping_add(index))
}

/// Generator seeded directly from `seed`.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent generator for a named purpose and index under `seed`.
pub fn derive(seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(sub_seed(seed, label, index));
    r.set_stream(index);
    r
}
