//! Fixtures shared by the benchmarks.

use llink_core::models::{build_toy_models, ToyModelConfig, ToyModels};
use llink_core::tensor::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_shape_fn((rows, cols), |_| r.random_range(-1.0..1.0))
}

pub fn toy_models() -> ToyModels {
    build_toy_models(&ToyModelConfig::default()).expect("default toy models")
}
