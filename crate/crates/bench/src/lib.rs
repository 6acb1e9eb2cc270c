//! Shared fixtures for the benchmarks.

use streampoint::model::{ModelConfig, ParamStore};

/// Default model, seeded initialization, single precision.
pub fn default_params(seed: u64) -> ParamStore<f32> {
    ParamStore::init(&ModelConfig::default(), seed)
        .expect("default config is valid")
        .cast::<f32>()
}
