//! Toy-scale training loop over generated scenes.

use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{batched_forward, CachePolicy};
use crate::error::{Error, Result};
use crate::heads::run_heads;
use crate::losses::{total_loss_graph, LossConfig, LossReport};
use crate::model::checkpoint::{Checkpoint, TrainingState};
use crate::model::{Graph, ModelConfig, ParamStore};
use crate::numerics::{AdamWConfig, OptimizerState};
use crate::scenegen::SceneSequence;

pub const LOG_HEADER: &str = "step,total,conf_local,conf_global,pose,wall_ms";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: u64,
    pub lr: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    /// Sequences per step.
    pub batch: usize,
    pub frames_min: usize,
    pub frames_max: usize,
    /// Largest gap between consecutive sampled frames.
    pub max_stride: usize,
    pub seed: u64,
    pub policy: CachePolicy,
    pub loss: LossConfig,
    /// Gradient global-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Strength of the sequence-level color jitter; 0 disables it.
    pub jitter: f32,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: u64,
    pub log_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            lr: 1e-3,
            warmup_steps: 100,
            weight_decay: 0.0,
            batch: 1,
            frames_min: 4,
            frames_max: 6,
            max_stride: 2,
            seed: 0,
            policy: CachePolicy::FullCausal,
            loss: LossConfig::default(),
            grad_clip: Some(1.0),
            jitter: 0.1,
            checkpoint_every: 0,
            log_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames_min < 2 || self.frames_max < self.frames_min {
            return Err(Error::Config(format!(
                "frames per sequence must satisfy 2 <= min <= max, got {}..{}",
                self.frames_min, self.frames_max
            )));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be >= 0", self.lr)));
        }
        if self.batch == 0 || self.max_stride == 0 {
            return Err(Error::Config("batch and max stride must be >= 1".into()));
        }
        if !(self.loss.alpha > 0.0) {
            return Err(Error::Config("alpha must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return Err(Error::Config("jitter must lie in [0, 1)".into()));
        }
        self.policy.validate()
    }

    /// Linear warmup to `lr` over `warmup_steps`, then constant.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            return self.lr;
        }
        self.lr * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
    }
}

/// Frames drawn from one scene, 0-based and increasing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub scene: usize,
    pub frames: Vec<usize>,
}

/// Draws `batch` ordered subsequences. Length is uniform in
/// `frames_min..=frames_max` (capped by the scene), the stride uniform in
/// `1..=max_stride` (capped so the subsequence fits), and the start
/// uniform over all valid positions.
pub fn sample_batch(
    rng: &mut impl Rng,
    scenes: &[SceneSequence],
    frames_min: usize,
    frames_max: usize,
    max_stride: usize,
    batch: usize,
) -> Result<Vec<Sample>> {
    if scenes.is_empty() {
        return Err(Error::Contract("no scenes to sample from".into()));
    }
    if let Some((i, s)) = scenes.iter().enumerate().find(|(_, s)| s.frames.len() < frames_min) {
        return Err(Error::Config(format!(
            "scene {i} has {} frames, fewer than the minimum {frames_min}",
            s.frames.len()
        )));
    }
    let mut out = Vec::with_capacity(batch);
    for _ in 0..batch {
        let scene = rng.random_range(0..scenes.len());
        let len = scenes[scene].frames.len();
        let n = rng.random_range(frames_min..=frames_max.min(len));
        let stride_cap = ((len - 1) / (n - 1)).clamp(1, max_stride.max(1));
        let stride = rng.random_range(1..=stride_cap);
        let span = (n - 1) * stride;
        let start = rng.random_range(0..len - span);
        out.push(Sample {
            scene,
            frames: (0..n).map(|i| start + i * stride).collect(),
        });
    }
    Ok(out)
}

/// Applies one brightness and per-channel gain draw to every frame.
pub fn color_jitter(seq: &mut SceneSequence, rng: &mut impl Rng, strength: f32) {
    if strength == 0.0 {
        return;
    }
    let b = 1.0 + rng.random_range(-strength..strength);
    let gains: [f32; 3] = std::array::from_fn(|_| b * (1.0 + 0.5 * rng.random_range(-strength..strength)));
    for f in &mut seq.frames {
        for (i, v) in f.rgb.iter_mut().enumerate() {
            *v = (*v * gains[i % 3]).clamp(0.0, 1.0);
        }
    }
}

fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ step.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

pub fn check_scenes(model: &ModelConfig, scenes: &[SceneSequence]) -> Result<()> {
    if scenes.is_empty() {
        return Err(Error::Contract("training needs at least one scene".into()));
    }
    for (i, s) in scenes.iter().enumerate() {
        if s.resolution() != (model.height, model.width) {
            return Err(Error::Config(format!(
                "scene {i} is {:?}, model expects {}x{}",
                s.resolution(),
                model.height,
                model.width
            )));
        }
    }
    Ok(())
}

/// Loss and parameter gradients of one sequence.
pub fn sequence_gradients(
    params: &ParamStore<f32>,
    seq: &SceneSequence,
    policy: CachePolicy,
    loss: &LossConfig,
) -> Result<(LossReport, Vec<Vec<f32>>)> {
    let mut g = Graph::new(params, true);
    let rgb: Vec<&[f32]> = seq.frames.iter().map(|f| f.rgb.as_slice()).collect();
    let pyr = batched_forward(&mut g, &rgb, policy)?;
    let heads = run_heads(&mut g, &pyr.levels, seq.frames.len())?;
    let (total, report) = total_loss_graph(&mut g, &heads, seq, loss)?;
    let mut grads = g.backward(total)?;
    let grads = g.param_grads(&mut grads)?;
    Ok((report, grads))
}

pub struct Trainer {
    config: TrainConfig,
    params: ParamStore<f32>,
    opt: OptimizerState<f32>,
    step: u64,
}

impl Trainer {
    pub fn new(model: &ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = ModelConfig {
            alpha: config.loss.alpha,
            ..model.clone()
        };
        let params = ParamStore::init(&model, config.seed)?.cast::<f32>();
        let opt = OptimizerState::new(
            AdamWConfig {
                lr: config.lr,
                weight_decay: config.weight_decay,
                ..Default::default()
            },
            &params.tensors(),
        );
        Ok(Trainer {
            config,
            params,
            opt,
            step: 0,
        })
    }

    /// Resumes from a checkpoint that carries training state.
    pub fn resume(ckpt: Checkpoint) -> Result<Self> {
        let t = ckpt
            .training
            .ok_or_else(|| Error::Contract("checkpoint has no training state".into()))?;
        let config: TrainConfig = serde_json::from_value(t.settings)?;
        config.validate()?;
        Ok(Trainer {
            config,
            params: ckpt.params,
            opt: t.optimizer,
            step: t.step,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Overrides the step budget, e.g. to extend a resumed run.
    pub fn set_steps(&mut self, steps: u64) {
        self.config.steps = steps;
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    /// Steps completed so far.
    pub fn step_index(&self) -> u64 {
        self.step
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            params: self.params.clone(),
            training: Some(TrainingState {
                step: self.step,
                optimizer: self.opt.clone(),
                settings: serde_json::to_value(&self.config)?,
            }),
        })
    }

    /// One optimizer step on a freshly sampled batch.
    pub fn step(&mut self, scenes: &[SceneSequence]) -> Result<LossReport> {
        let cfg = &self.config;
        let mut rng = step_rng(cfg.seed, self.step);
        let batch = sample_batch(&mut rng, scenes, cfg.frames_min, cfg.frames_max, cfg.max_stride, cfg.batch)?;
        let mut grads: Option<Vec<Vec<f32>>> = None;
        let mut report = LossReport::default();
        let inv = 1.0 / batch.len() as f64;
        for s in &batch {
            let mut seq = scenes[s.scene].subsequence(&s.frames)?;
            color_jitter(&mut seq, &mut rng, cfg.jitter);
            if let Some(f) = seq.frames.iter().find(|f| f.rgb.iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFinite {
                    step: self.step,
                    detail: format!("scene {} frame {} has non-finite pixels", s.scene, f.index),
                });
            }
            let (r, g) = sequence_gradients(&self.params, &seq, cfg.policy, &cfg.loss)?;
            if !r.is_finite() {
                return Err(Error::NonFinite {
                    step: self.step,
                    detail: format!("scene {} frames {:?}: {r:?}", s.scene, s.frames),
                });
            }
            for (acc, v) in [
                (&mut report.total, r.total),
                (&mut report.conf_local, r.conf_local),
                (&mut report.conf_global, r.conf_global),
                (&mut report.pose_q, r.pose_q),
                (&mut report.pose_tau, r.pose_tau),
                (&mut report.pose_f, r.pose_f),
                (&mut report.mean_conf_local, r.mean_conf_local),
                (&mut report.mean_conf_global, r.mean_conf_global),
            ] {
                *acc += v * inv;
            }
            match &mut grads {
                None => grads = Some(g),
                Some(acc) => acc
                    .iter_mut()
                    .zip(&g)
                    .for_each(|(a, b)| a.iter_mut().zip(b).for_each(|(x, y)| *x += y)),
            }
        }
        let mut grads = grads.expect("batch is non-empty");
        let mut scale = inv as f32;
        let norm_sq: f64 = grads.iter().flatten().map(|&v| (v as f64).powi(2)).sum();
        let norm = norm_sq.sqrt() * inv;
        if !norm.is_finite() {
            return Err(Error::NonFinite {
                step: self.step,
                detail: "gradient norm is not finite".into(),
            });
        }
        if let Some(clip) = cfg.grad_clip {
            if norm > clip {
                scale *= (clip / norm) as f32;
            }
        }
        grads.iter_mut().flatten().for_each(|v| *v *= scale);
        let lr = cfg.lr_at(self.step);
        let decay = self.params.decay_flags();
        let refs: Vec<&[f32]> = grads.iter().map(|g| g.as_slice()).collect();
        self.opt.step(&mut self.params.tensors_mut(), &refs, &decay, lr)?;
        self.step += 1;
        Ok(report)
    }
}

/// Outcome of [`train`].
pub struct TrainSummary {
    pub history: Vec<LossReport>,
    pub final_checkpoint: PathBuf,
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("ckpt_{step:06}.s3r"))
}

/// Runs `trainer` to its step budget, writing the CSV log, periodic
/// checkpoints and `final.s3r` into `out_dir`.
pub fn train(trainer: &mut Trainer, scenes: &[SceneSequence], out_dir: &Path) -> Result<TrainSummary> {
    check_scenes(trainer.params.config(), scenes)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = trainer
        .config
        .log_path
        .clone()
        .unwrap_or_else(|| out_dir.join("train_log.csv"));
    let resuming = trainer.step > 0 && log_path.exists();
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(resuming)
        .write(true)
        .truncate(!resuming)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let io = |e| Error::io(&log_path, e);
    if !resuming {
        writeln!(log, "{LOG_HEADER}").map_err(io)?;
    }
    let mut history = Vec::new();
    while trainer.step < trainer.config.steps {
        let t0 = Instant::now();
        let step = trainer.step;
        let r = trainer.step(scenes)?;
        let ms = t0.elapsed().as_secs_f64() * 1e3;
        writeln!(
            log,
            "{step},{:.6},{:.6},{:.6},{:.6},{ms:.3}",
            r.total,
            r.conf_local,
            r.conf_global,
            r.pose()
        )
        .map_err(io)?;
        if step.is_multiple_of(100) {
            log::info!("step {step} loss {:.4} ({ms:.1} ms)", r.total);
            log.flush().map_err(io)?;
        }
        history.push(r);
        let every = trainer.config.checkpoint_every;
        if every > 0 && trainer.step.is_multiple_of(every) {
            trainer.checkpoint()?.save(&checkpoint_path(out_dir, trainer.step))?;
        }
    }
    log.flush().map_err(io)?;
    let final_checkpoint = out_dir.join("final.s3r");
    trainer.checkpoint()?.save(&final_checkpoint)?;
    Ok(TrainSummary {
        history,
        final_checkpoint,
    })
}

/// Loads every dataset directory.
pub fn load_scenes(dirs: &[PathBuf]) -> Result<Vec<SceneSequence>> {
    dirs.iter().map(|d| crate::scenegen::read_dataset(d)).collect()
}
