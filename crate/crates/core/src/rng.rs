//! Seeded random streams.
//!
//! Every stochastic routine takes `&mut FilterRng` explicitly; nothing in the
//! crate touches a global generator.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type FilterRng = ChaCha8Rng;

/// Creates a generator from a 64-bit seed.
pub fn seeded(seed: u64) -> FilterRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent child stream, advancing the parent.
pub fn split(rng: &mut FilterRng) -> FilterRng {
    let mut seed = [0u8; 32];
    rng.fill_bytes(&mut seed);
    ChaCha8Rng::from_seed(seed)
}

/// Stream for trial `index` of an experiment seeded with `seed`.
pub fn trial_stream(seed: u64, index: u64) -> FilterRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index + 1);
    rng
}
