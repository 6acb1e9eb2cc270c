use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::Context;
use serde::Serialize;

/// Record of one invocation: enough to rerun it.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub version: &'static str,
    pub git_hash: &'static str,
    pub threads: usize,
    pub started_unix_ms: u128,
    pub wall_ms: f64,
    pub outputs: Vec<PathBuf>,
}

pub struct Recorder {
    manifest: RunManifest,
    start: Instant,
}

impl Recorder {
    pub fn start(command: &str, threads: usize) -> Self {
        Recorder {
            manifest: RunManifest {
                command: command.to_string(),
                argv: std::env::args().collect(),
                config: serde_json::Value::Null,
                seed: None,
                version: env!("CARGO_PKG_VERSION"),
                git_hash: option_env!("STREAMPOINT_GIT_HASH").unwrap_or("unknown"),
                threads,
                started_unix_ms: SystemTime::now()
                    .duration_since(UNIX_EPOCH)
                    .map_or(0, |d| d.as_millis()),
                wall_ms: 0.0,
                outputs: Vec::new(),
            },
            start: Instant::now(),
        }
    }

    pub fn config(&mut self, config: &impl Serialize, seed: Option<u64>) -> anyhow::Result<()> {
        self.manifest.config = serde_json::to_value(config)?;
        self.manifest.seed = seed;
        Ok(())
    }

    pub fn output(&mut self, path: impl Into<PathBuf>) {
        self.manifest.outputs.push(path.into());
    }

    pub fn finish(mut self, path: &Path) -> anyhow::Result<RunManifest> {
        self.manifest.wall_ms = self.start.elapsed().as_secs_f64() * 1e3;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        std::fs::write(path, serde_json::to_vec_pretty(&self.manifest)?)
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(self.manifest)
    }
}
