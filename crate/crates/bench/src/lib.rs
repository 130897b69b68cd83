//! Shared fixtures for the benchmarks.

use progae_core::model::LatentCode;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn codes(n: usize, dim: usize, seed: u64) -> Vec<LatentCode> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| LatentCode::sample(dim, &mut rng)).collect()
}
