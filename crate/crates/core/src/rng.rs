//! Seeded randomness.
//!
//! Every stochastic operation takes its generator explicitly. Streams are
//! derived from a 64-bit seed plus a list of tags (for example `[step, micro]`)
//! so that the draws of one training step never depend on how many numbers an
//! earlier step consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Named streams used by the trainer and the analysis code.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const BATCH: u64 = 2;
    pub const DROPOUT: u64 = 3;
    pub const EVAL: u64 = 4;
    pub const ANALYSIS: u64 = 5;
    pub const BENCH: u64 = 6;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Generator keyed by `seed` and an ordered list of tags.
pub fn keyed(seed: u64, tags: &[u64]) -> Rng {
    let mut h = splitmix64(seed);
    for &t in tags {
        h = splitmix64(h ^ splitmix64(t.wrapping_add(0x5851_f42d_4c95_7f2d)));
    }
    Rng::seed_from_u64(h)
}
