use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use streampoint::bench::cache_scaling;
use streampoint::decoder::{CachePolicy, StreamSession};
use streampoint::eval::evaluate_dirs;
use streampoint::heads::write_prediction;
use streampoint::model::checkpoint::Checkpoint;
use streampoint::model::ParamStore;
use streampoint::scenegen::{generate_scene, write_dataset, RgbReader};
use streampoint::trainer::{load_scenes, train, Trainer};

use crate::args::{BenchArgs, EvalArgs, ScenegenArgs, StreamArgs, TrainArgs};
use crate::config::{self, usage, BenchSettings, EvalSettings, ScenegenSettings, StreamSettings, TrainSettings};
use crate::manifest::Recorder;

pub const STATS_HEADER: &str = "frame,phase,latency_ms,attended_tokens,resident_tokens,resident_bound";
pub const BENCH_HEADER: &str = "policy,n_frames,frame,attended_tokens,resident_tokens,wall_ms";

pub fn scene_dir(out: &Path, i: usize) -> PathBuf {
    out.join(format!("scene_{i:04}"))
}

pub fn scenegen(args: ScenegenArgs, threads: usize) -> Result<()> {
    let mut rec = Recorder::start("scenegen", threads);
    let mut s: ScenegenSettings = config::load(args.common.config.as_deref())?;
    if let Some(v) = args.seed {
        s.seed = v;
    }
    if let Some(v) = args.count {
        s.count = v;
    }
    if let Some(v) = args.frames {
        s.scene.n_frames = v;
    }
    if let Some((h, w)) = args.res {
        s.scene.height = h;
        s.scene.width = w;
    }
    if let Some(v) = args.patch {
        s.scene.patch_size = v;
    }
    if let Some(v) = args.primitives {
        s.scene.n_primitives = v;
    }
    if let Some(v) = args.trajectory {
        s.scene.trajectory = v;
    }
    s.scene.dynamic |= args.dynamic;
    s.scene.metric_scale |= args.metric;
    if s.count == 0 {
        return Err(usage("--count must be at least 1"));
    }
    let p = s.scene.patch_size;
    if p == 0 || !s.scene.height.is_multiple_of(p) || !s.scene.width.is_multiple_of(p) {
        return Err(usage(format!(
            "--res {}x{} is not divisible by patch size {p}",
            s.scene.height, s.scene.width
        )));
    }
    rec.config(&s, Some(s.seed))?;
    let dirs: Vec<PathBuf> = (0..s.count).map(|i| scene_dir(&args.out, i)).collect();
    dirs.par_iter().enumerate().try_for_each(|(i, dir)| -> Result<()> {
        let seq = generate_scene(s.seed + i as u64, &s.scene)?;
        write_dataset(&seq, dir).with_context(|| format!("writing {}", dir.display()))?;
        Ok(())
    })?;
    for d in &dirs {
        rec.output(d);
    }
    println!("wrote {} scene(s) to {}", s.count, args.out.display());
    rec.finish(&args.common.manifest.unwrap_or_else(|| args.out.join("run_manifest.json")))?;
    Ok(())
}

pub fn train_cmd(args: TrainArgs, threads: usize) -> Result<()> {
    let mut rec = Recorder::start("train", threads);
    let mut s: TrainSettings = config::load(args.common.config.as_deref())?;
    let t = &mut s.train;
    macro_rules! set {
        ($flag:expr, $field:expr) => {
            if let Some(v) = $flag {
                $field = v;
            }
        };
    }
    set!(args.steps, t.steps);
    set!(args.lr, t.lr);
    set!(args.warmup, t.warmup_steps);
    set!(args.seed, t.seed);
    set!(args.batch, t.batch);
    set!(args.frames_min, t.frames_min);
    set!(args.frames_max, t.frames_max);
    set!(args.policy, t.policy);
    set!(args.alpha, t.loss.alpha);
    set!(args.lambda_pose, t.loss.lambda_pose);
    set!(args.checkpoint_every, t.checkpoint_every);
    if let Some((h, w)) = args.res {
        s.model.height = h;
        s.model.width = w;
    }
    let mut trainer = match &args.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let mut tr = Trainer::resume(ckpt)?;
            if let Some(steps) = args.steps {
                tr.set_steps(steps);
            }
            s.model = tr.params().config().clone();
            s.train = tr.config().clone();
            tr
        }
        None => Trainer::new(&s.model, s.train.clone())?,
    };
    rec.config(&s, Some(s.train.seed))?;
    let scenes = load_scenes(&args.data)?;
    let summary = train(&mut trainer, &scenes, &args.out)?;
    if let Some(last) = summary.history.last() {
        println!(
            "trained {} steps, final loss {:.5} (conf {:.5}, pose {:.5})",
            trainer.step_index(),
            last.total,
            last.conf(),
            last.pose()
        );
    } else {
        println!("no steps run; wrote initial weights");
    }
    rec.output(&summary.final_checkpoint);
    rec.finish(&args.common.manifest.unwrap_or_else(|| args.out.join("run_manifest.json")))?;
    Ok(())
}

/// Largest resident token count allowed at frame `t`: the policy-bounded
/// cache plus the incoming frame.
pub fn resident_bound(policy: CachePolicy, t: usize, k: usize) -> usize {
    let cached = match policy {
        CachePolicy::Window(w) => (t - 1).min(w + 1),
        _ => t - 1,
    };
    (cached + 1) * k
}

pub fn stream(args: StreamArgs, threads: usize) -> Result<()> {
    let mut rec = Recorder::start("stream", threads);
    let s: StreamSettings = config::load(args.common.config.as_deref())?;
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let cfg = ckpt.config().clone();
    let policy = args.policy.or(s.policy).unwrap_or(cfg.default_policy);
    policy.validate().map_err(|e| usage(e.to_string()))?;
    rec.config(&serde_json::json!({ "policy": policy, "model": cfg }), None)?;
    let reader = RgbReader::open(&args.scene)?;
    if reader.resolution() != (cfg.height, cfg.width) {
        bail!(
            "shape mismatch: scene {} is {}x{}, checkpoint {} expects {}x{}",
            args.scene.display(),
            reader.resolution().0,
            reader.resolution().1,
            args.ckpt.display(),
            cfg.height,
            cfg.width
        );
    }
    if let Some(dir) = &args.dump_pred {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut stats = match &args.stats {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?);
            writeln!(w, "{STATS_HEADER}")?;
            Some(w)
        }
        None => None,
    };
    let k = cfg.tokens_per_frame();
    let params = ckpt.params;
    let mut session = StreamSession::new(&params, policy)?;
    let mut peak = 0;
    for t in 1..=reader.len() {
        let rgb = reader.read(t)?;
        let t0 = Instant::now();
        let out = session.ingest_frame(&rgb)?;
        let ms = t0.elapsed().as_secs_f64() * 1e3;
        let bound = resident_bound(policy, t, k);
        if out.resident_tokens > bound {
            bail!("frame {t}: {} resident tokens exceed the policy bound {bound}", out.resident_tokens);
        }
        peak = peak.max(out.resident_tokens);
        if let Some(dir) = &args.dump_pred {
            write_prediction(dir, &out.prediction)?;
            if let Some(first) = session.take_revised_first() {
                write_prediction(dir, &first.prediction)?;
            }
        }
        if let Some(w) = &mut stats {
            writeln!(w, "{t},stream,{ms:.3},{},{},{bound}", out.attended_tokens, out.resident_tokens)?;
            w.flush()?;
        }
    }
    let t0 = Instant::now();
    let revised = session.finalize()?;
    let ms = t0.elapsed().as_secs_f64() * 1e3;
    for out in &revised {
        if let Some(dir) = &args.dump_pred {
            write_prediction(dir, &out.prediction)?;
        }
        if let Some(w) = &mut stats {
            writeln!(w, "{},revisit,{ms:.3},{},{},{}", out.frame, out.attended_tokens, out.resident_tokens, reader.len() * k)?;
        }
    }
    if let Some(mut w) = stats {
        w.flush()?;
        rec.output(args.stats.clone().expect("stats path"));
    }
    println!(
        "streamed {} frames under {policy}; peak resident tokens {peak}",
        reader.len()
    );
    let default_manifest = args
        .dump_pred
        .as_ref()
        .map(|d| d.join("run_manifest.json"))
        .or_else(|| args.stats.as_ref().map(|s| s.with_extension("manifest.json")));
    if let Some(dir) = &args.dump_pred {
        rec.output(dir);
    }
    if let Some(path) = args.common.manifest.or(default_manifest) {
        rec.finish(&path)?;
    }
    Ok(())
}

pub fn eval(args: EvalArgs, threads: usize) -> Result<()> {
    let mut rec = Recorder::start("eval", threads);
    let mut s: EvalSettings = config::load(args.common.config.as_deref())?;
    if let Some(a) = args.depth_align {
        s.eval.depth_alignment = a;
    }
    if args.no_align_cloud {
        s.eval.align_cloud = false;
    }
    rec.config(&s, None)?;
    let report = evaluate_dirs(&args.scene, &args.pred, &s.eval)?;
    let out = args.out.unwrap_or_else(|| args.pred.join("metrics.json"));
    report.write(&out)?;
    if let Some(d) = &report.depth {
        println!("abs_rel {:.6}  delta<1.25 {:.4}", d.abs_rel, d.delta_125);
    }
    if let Some(p) = &report.pose {
        println!("ate {:.6}  rpe_trans {:.6}  rpe_rot {:.4} deg", p.ate, p.rpe_trans, p.rpe_rot);
    }
    if let Some(r) = &report.recon {
        println!("acc {:.6}  comp {:.6}  nc {:.4}", r.acc_mean, r.comp_mean, r.nc_mean);
    }
    for note in &report.provenance.skipped {
        println!("skipped {note}");
    }
    rec.output(&out);
    rec.finish(&args.common.manifest.unwrap_or_else(|| out.with_file_name("run_manifest.json")))?;
    Ok(())
}

pub fn bench(args: BenchArgs, threads: usize) -> Result<()> {
    let mut rec = Recorder::start("bench", threads);
    let mut s: BenchSettings = config::load(args.common.config.as_deref())?;
    if let Some(v) = args.seed {
        s.seed = v;
    }
    if let Some(v) = args.frames {
        s.frames = v;
    }
    if let Some(v) = args.policies {
        s.policies = v;
    }
    if let Some(v) = args.repeats {
        s.repeats = v;
    }
    if s.frames.contains(&0) || s.repeats == 0 {
        return Err(usage("frame counts and repeats must be positive"));
    }
    let params = match &args.ckpt {
        Some(p) => Checkpoint::load(p)?.params,
        None => ParamStore::init(&s.model, s.seed)?.cast::<f32>(),
    };
    s.model = params.config().clone();
    rec.config(&s, Some(s.seed))?;
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let csv_path = args.out.join("bench.csv");
    let mut csv = BufWriter::new(File::create(&csv_path)?);
    writeln!(csv, "{BENCH_HEADER}")?;
    let mut summary = Vec::new();
    println!("{:<12} {:>6} {:>14} {:>12} {:>16}", "policy", "frames", "ms/frame", "total ms", "attended (last)");
    for &policy in &s.policies {
        for &n in &s.frames {
            let run = cache_scaling(&params, policy, n, s.repeats, s.seed)?;
            for f in &run.frames {
                writeln!(
                    csv,
                    "{policy},{n},{},{},{},{:.4}",
                    f.frame, f.attended_tokens, f.resident_tokens, f.wall_ms
                )?;
            }
            let last = run.frames.last().map_or(0, |f| f.attended_tokens);
            println!(
                "{:<12} {:>6} {:>14.3} {:>12.1} {:>16}",
                policy.to_string(),
                n,
                run.mean_frame_ms(),
                run.total_ms,
                last
            );
            summary.push(serde_json::json!({
                "policy": policy,
                "n_frames": n,
                "mean_frame_ms": run.mean_frame_ms(),
                "total_ms": run.total_ms,
                "finalize_ms": run.finalize_ms,
                "peak_resident_tokens": run.peak_resident_tokens(),
            }));
        }
    }
    csv.flush()?;
    let summary_path = args.out.join("bench_summary.json");
    std::fs::write(&summary_path, serde_json::to_vec_pretty(&summary)?)?;
    rec.output(&csv_path);
    rec.output(&summary_path);
    rec.finish(&args.common.manifest.unwrap_or_else(|| args.out.join("run_manifest.json")))?;
    Ok(())
}
