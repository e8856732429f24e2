//! Seeded fixtures shared by the benchmarks.

use pointssm_core::data::synthetic_split;
use pointssm_core::gradcheck::random_tensor;
use pointssm_core::model::{prepare, Model, ModelConfig, Prepared};
use pointssm_core::nn::ParamStore;
use pointssm_core::ssm::LtiSystem;
use pointssm_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A random fixed system and a `[channels, len]` input.
pub fn lti_instance(channels: usize, state: usize, len: usize) -> (LtiSystem, Tensor) {
    let mut r = rng(1);
    let sys = LtiSystem::random(&mut r, channels, state);
    let x = random_tensor(&mut r, &[channels, len], 1.0);
    (sys, x)
}

/// The default model with `n` prepared synthetic clouds of 256 points.
pub fn desk_model(n: usize) -> (Model, ParamStore, Vec<Prepared>) {
    let cfg = ModelConfig::default();
    let (model, store) = Model::init(&cfg).expect("default config is valid");
    let clouds = synthetic_split(n.div_ceil(8), 256, 0, 0, true).expect("synthetic data");
    let data = clouds
        .iter()
        .take(n)
        .map(|c| prepare(&cfg, c).expect("prepare"))
        .collect();
    (model, store, data)
}
