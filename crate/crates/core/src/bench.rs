//! Per-frame cost of streaming inference under each cache policy.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{attended_token_count, CachePolicy, StreamSession};
use crate::error::{Error, Result};
use crate::model::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameTiming {
    pub frame: usize,
    pub attended_tokens: usize,
    pub resident_tokens: usize,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyRun {
    pub policy: CachePolicy,
    pub n_frames: usize,
    pub frames: Vec<FrameTiming>,
    /// Wall time of the offline revisit, zero for causal policies.
    pub finalize_ms: f64,
    pub total_ms: f64,
}

impl PolicyRun {
    pub fn mean_frame_ms(&self) -> f64 {
        self.total_ms / self.n_frames as f64
    }

    pub fn peak_resident_tokens(&self) -> usize {
        self.frames.iter().map(|f| f.resident_tokens).max().unwrap_or(0)
    }
}

/// Uniform random frames at the model resolution.
pub fn synthetic_frames(params: &ParamStore<f32>, n: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = params.config().pixels() * 3;
    (0..n).map(|_| (0..len).map(|_| rng.random::<f32>()).collect()).collect()
}

/// Streams `frames` once, timing each ingest.
pub fn stream_timed(params: &ParamStore<f32>, policy: CachePolicy, frames: &[Vec<f32>]) -> Result<PolicyRun> {
    let k = params.config().tokens_per_frame();
    let mut session = StreamSession::new(params, policy)?;
    let start = Instant::now();
    let mut rows = Vec::with_capacity(frames.len());
    for rgb in frames {
        let t0 = Instant::now();
        let out = session.ingest_frame(rgb)?;
        let wall_ms = t0.elapsed().as_secs_f64() * 1e3;
        if out.attended_tokens != attended_token_count(policy, out.frame, k) {
            return Err(Error::Consistency(format!(
                "frame {} attended {} tokens, policy predicts {}",
                out.frame,
                out.attended_tokens,
                attended_token_count(policy, out.frame, k)
            )));
        }
        rows.push(FrameTiming {
            frame: out.frame,
            attended_tokens: out.attended_tokens,
            resident_tokens: out.resident_tokens,
            wall_ms,
        });
    }
    let t0 = Instant::now();
    if policy == CachePolicy::FullAttention {
        session.finalize()?;
    }
    let finalize_ms = t0.elapsed().as_secs_f64() * 1e3;
    Ok(PolicyRun {
        policy,
        n_frames: frames.len(),
        frames: rows,
        finalize_ms,
        total_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Fastest of `repeats` runs over the same `n` synthetic frames.
pub fn cache_scaling(
    params: &ParamStore<f32>,
    policy: CachePolicy,
    n: usize,
    repeats: usize,
    seed: u64,
) -> Result<PolicyRun> {
    if n == 0 || repeats == 0 {
        return Err(Error::Config("bench needs at least one frame and one repeat".into()));
    }
    let frames = synthetic_frames(params, n, seed);
    let mut best: Option<PolicyRun> = None;
    for _ in 0..repeats {
        let run = stream_timed(params, policy, &frames)?;
        if best.as_ref().is_none_or(|b| run.total_ms < b.total_ms) {
            best = Some(run);
        }
    }
    Ok(best.expect("repeats > 0"))
}
