//! Deterministic seed-stream derivation.
//!
//! A single 64-bit seed expands into independent sub-streams keyed by a
//! domain tag plus indices. Per-element randomness (e.g. the jitter of brick
//! #7) is keyed by the element identity, so it is stable under parameter
//! changes that do not change the element count.

use rand_chacha::ChaCha12Rng;
use rand::SeedableRng;

/// Domain tags keeping unrelated sub-streams disjoint.
pub mod domain {
    pub const ELEMENT: u64 = 0x454c_454d;
    pub const SAMPLE: u64 = 0x5341_4d50;
    pub const EPOCH: u64 = 0x4550_4f43;
    pub const WEIGHT_INIT: u64 = 0x5749_4e49;
    pub const INIT_SEARCH: u64 = 0x494e_4954;
    pub const TARGET: u64 = 0x5447_5254;
}

/// splitmix64 finalizer; the standard 64-bit avalanche mix.
#[inline]
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Combine a seed with stream coordinates into a new 64-bit seed.
#[inline]
pub fn mix(seed: u64, parts: &[u64]) -> u64 {
    let mut acc = splitmix64(seed);
    for &p in parts {
        acc = splitmix64(acc ^ splitmix64(p));
    }
    acc
}

/// Deterministic RNG for the sub-stream `(seed, domain, parts...)`.
pub fn substream(seed: u64, domain: u64, parts: &[u64]) -> ChaCha12Rng {
    let mut acc = mix(seed, &[domain]);
    acc = mix(acc, parts);
    ChaCha12Rng::seed_from_u64(acc)
}

/// Uniform f64 in [0, 1) from a raw mixed value; handy for single draws
/// without constructing an RNG.
#[inline]
pub fn unit_f64(x: u64) -> f64 {
    // 53 high bits -> [0, 1)
    (x >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
