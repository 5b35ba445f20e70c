//! Seed splitting.
//!
//! Every random stream in the pipeline is derived from one top-level `u64`
//! seed. A child seed is `splitmix64(parent ^ fnv1a(tag)) ` folded with the
//! index through a second `splitmix64` round:
//!
//! ```text
//! child(parent, tag, index) = splitmix64(splitmix64(parent ^ fnv1a64(tag)) ^ index)
//! ```
//!
//! The rule depends only on `(parent, tag, index)`, so per-trace streams are
//! independent of generation or scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(parent: u64, tag: &str, index: u64) -> u64 {
    splitmix64(splitmix64(parent ^ fnv1a64(tag.as_bytes())) ^ index)
}

pub fn rng_for(parent: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parent, tag, index))
}
