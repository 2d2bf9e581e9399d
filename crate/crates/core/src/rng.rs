//! Seeded, platform-independent random streams.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type DgmRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> DgmRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `n` draws from `U[lo, hi)`.
pub fn uniform_vec(rng: &mut DgmRng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}
