//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! seeded from a global seed mixed with stable identifiers, so results do not
//! depend on iteration order or on the platform's hasher.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn mix(seed: u64, value: u64) -> u64 {
    splitmix64(seed ^ splitmix64(value))
}

/// Mixes a string identifier (FNV-1a) into a seed.
pub fn mix_str(seed: u64, s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    mix(seed, h)
}

pub fn rng_from(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Generator for one sample: `hash(global_seed, stream, index)`.
pub fn sample_rng(global_seed: u64, stream: u64, index: u64) -> Rng {
    rng_from(mix(mix(global_seed, stream), index))
}
