//! Labelled sub-seed derivation.
//!
//! Every random stream in a run is keyed by `(parent seed, label)`, so one stage can be
//! re-run in isolation and still draw exactly the numbers it drew inside the full run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed and a textual label.
pub fn derive_seed(parent: u64, label: &str) -> u64 {
    let mut h = FNV_OFFSET;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    splitmix64(parent ^ splitmix64(h))
}

/// Derive a child seed from a parent seed and an ordinal.
pub fn derive_seed_n(parent: u64, n: u64) -> u64 {
    splitmix64(parent ^ splitmix64(n.wrapping_add(0x5851_f42d_4c95_7f2d)))
}

/// Portable, reproducible generator seeded from a labelled sub-seed.
pub fn rng_for(parent: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parent, label))
}
