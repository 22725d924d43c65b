//! Fixtures shared by the benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use remix_core::data::{gen_bimodal_toy, Dataset};
use remix_core::models::RecursiveMixtureModel;
use remix_core::tensor::Tensor;
use remix_core::training::{Method, TrainConfig};

pub const BATCH: usize = 128;

/// Toy dataset and one batch of its rows.
pub fn toy_batch(seed: u64) -> (Dataset, Tensor) {
    let data = gen_bimodal_toy(2000, seed);
    let x = data.rows(&(0..BATCH).collect::<Vec<_>>());
    (data, x)
}

/// Untrained mixture of order `m` with the toy architecture.
pub fn toy_model(data: &Dataset, m: usize, seed: u64) -> RecursiveMixtureModel {
    let config = TrainConfig::bimodal_toy(Method::Rme, m, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RecursiveMixtureModel::new(config.model_spec(data), m, &mut rng).expect("valid toy spec")
}
