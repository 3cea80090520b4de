//! Deterministic RNG streams.
//!
//! Every random decision in the pipeline draws from a stream derived from
//! `(seed, stream, step)`, so any step's randomness can be reproduced
//! without replaying the steps before it. That is what makes checkpoint
//! resume bitwise exact: no RNG state needs to be saved.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Well-known stream tags; keep values stable, they feed seed derivation.
pub mod stream {
    pub const PARAM_INIT: u64 = 1;
    pub const SAMPLING: u64 = 2;
    pub const PROBE: u64 = 3;
    pub const CORPUS: u64 = 4;
}

pub fn stream_rng(seed: u64, stream: u64, step: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(seed, stream), step))
}

/// Stable avalanche hash for bucketing unbounded id spaces.
pub fn hash64(x: u64) -> u64 {
    mix(x, 0x517C_C1B7_2722_0A95)
}

/// splitmix64 finalizer over a combined word; avalanches every input bit.
fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
