//! Deterministic RNG substreams.
//!
//! Every stochastic decision in a run (init, partition shuffles, batch
//! shuffles, adversarial sample choice, client sampling, evaluation attacks)
//! draws from its own ChaCha stream keyed by the run seed plus a tag path,
//! so strategies cannot perturb each other's randomness.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Substream keyed by (seed, tags...). Same key, same stream.
pub fn substream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut s = splitmix(seed);
    for &t in tags {
        s = splitmix(s ^ t.wrapping_mul(0xD1B54A32D192ED03));
    }
    ChaCha8Rng::seed_from_u64(s)
}

/// Fixed tags for the substream domains.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const PARTITION: u64 = 2;
    pub const CLIENT_SAMPLING: u64 = 3;
    pub const CLIENT_LOCAL: u64 = 4;
    pub const EVAL_ATTACK: u64 = 5;
    pub const DATA_GEN: u64 = 6;
}
