use std::fmt;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use streampoint::eval::EvalConfig;
use streampoint::model::ModelConfig;
use streampoint::scenegen::SceneConfig;
use streampoint::trainer::TrainConfig;

/// Bad flags or configuration; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Settings from `path`, or defaults when no file is given.
pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> anyhow::Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let bytes = std::fs::read(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| usage(format!("config {}: {e}", path.display())))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenegenSettings {
    pub seed: u64,
    pub count: usize,
    pub scene: SceneConfig,
}

impl Default for ScenegenSettings {
    fn default() -> Self {
        ScenegenSettings {
            seed: 0,
            count: 1,
            scene: SceneConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct StreamSettings {
    pub policy: Option<streampoint::decoder::CachePolicy>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchSettings {
    /// Used when no checkpoint is given.
    pub model: ModelConfig,
    pub seed: u64,
    pub frames: Vec<usize>,
    pub policies: Vec<streampoint::decoder::CachePolicy>,
    pub repeats: usize,
}

impl Default for BenchSettings {
    fn default() -> Self {
        use streampoint::decoder::CachePolicy;
        BenchSettings {
            model: ModelConfig::default(),
            seed: 0,
            frames: vec![8, 32, 128],
            policies: vec![CachePolicy::FullCausal, CachePolicy::Window(5), CachePolicy::FullAttention],
            repeats: 1,
        }
    }
}
