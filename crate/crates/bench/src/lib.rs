//! Deterministic fixtures shared by the benchmarks.

use eddyseg_core::Tensor4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform values in [-1, 1) from a fixed seed.
pub fn random_tensor(dims: [usize; 4], seed: u64) -> Tensor4<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor4::from_fn(dims, |_| rng.random_range(-1.0..1.0))
}

/// Random class labels for `n` pixels.
pub fn random_classes(n: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..3u8)).collect()
}
