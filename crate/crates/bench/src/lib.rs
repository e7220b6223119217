//! Shared fixtures for the benchmarks.

use fghash::{FeatureMatrix, ModelConfig, ModelParams, PackedCodes, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_code(q: usize, rng: &mut impl Rng) -> Vec<i8> {
    (0..q).map(|_| if rng.random_bool(0.5) { 1 } else { -1 }).collect()
}

/// `n` random codes of `q` bits with labels cycling over ten classes.
pub fn random_codes(n: usize, q: usize, seed: u64) -> PackedCodes {
    let mut r = rng(seed);
    let codes: Vec<Vec<i8>> = (0..n).map(|_| random_code(q, &mut r)).collect();
    PackedCodes::from_codes(codes.iter().map(|c| c.as_slice()), q, (0..n).map(|i| i % 10).collect())
        .expect("valid codes")
}

pub fn random_features(n: usize, d: usize, seed: u64) -> FeatureMatrix {
    let mut r = rng(seed);
    FeatureMatrix::new(n, d, (0..n * d).map(|_| r.random_range(-1.0f32..1.0)).collect()).expect("valid shape")
}

pub fn random_image(side: usize, seed: u64) -> Tensor {
    let mut r = rng(seed);
    Tensor::new(vec![side, side, 3], (0..side * side * 3).map(|_| r.random_range(0.0..1.0)).collect())
        .expect("valid shape")
}

pub fn default_model(seed: u64) -> ModelParams {
    ModelParams::init(&ModelConfig::default(), &mut rng(seed)).expect("default config is valid")
}
