use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use streampoint::decoder::{batched_forward, CachePolicy};
use streampoint::heads::{read_prediction, run_heads};
use streampoint::model::checkpoint::Checkpoint;
use streampoint::model::{Graph, ModelConfig, ParamStore};
use streampoint::scenegen::read_dataset;
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_streampoint"));
    c.env("STREAMPOINT_THREADS", "1");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_model() -> ModelConfig {
    ModelConfig {
        height: 16,
        width: 16,
        dim: 16,
        heads: 2,
        encoder_depth: 1,
        decoder_depth: 2,
        ..Default::default()
    }
}

/// Config file for a small model and short training runs.
fn train_config(dir: &Path) -> PathBuf {
    let path = dir.join("train.json");
    let cfg = serde_json::json!({
        "model": small_model(),
        "train": { "frames_min": 2, "frames_max": 3, "warmup_steps": 2 }
    });
    fs::write(&path, serde_json::to_vec(&cfg).unwrap()).unwrap();
    path
}

fn scenes(dir: &Path, frames: usize, count: usize) -> PathBuf {
    let out = dir.join(format!("scenes_{frames}"));
    ok(&[
        "scenegen", "--seed", "4", "--frames", &frames.to_string(), "--res", "16", "--count",
        &count.to_string(), "--out", s(&out),
    ]);
    out
}

fn trained(dir: &Path, data: &Path, steps: u64) -> PathBuf {
    let out = dir.join(format!("run_{steps}"));
    let cfg = train_config(dir);
    ok(&[
        "train", "--config", s(&cfg), "--data", s(&data.join("scene_0000")), "--steps", &steps.to_string(),
        "--out", s(&out),
    ]);
    out.join("final.s3r")
}

#[test]
fn scenegen_writes_count_dirs_deterministically() {
    let tmp = TempDir::new().unwrap();
    let a = scenes(tmp.path(), 3, 3);
    for i in 0..3 {
        let d = a.join(format!("scene_{i:04}"));
        assert_eq!(read_dataset(&d).unwrap().frames.len(), 3);
    }
    assert!(!a.join("scene_0003").exists());
    assert!(a.join("run_manifest.json").exists());
    let b = tmp.path().join("again");
    ok(&["scenegen", "--seed", "4", "--frames", "3", "--res", "16", "--count", "3", "--out", s(&b)]);
    for i in 0..3 {
        let name = format!("scene_{i:04}");
        for entry in fs::read_dir(a.join(&name)).unwrap() {
            let f = entry.unwrap().file_name();
            assert_eq!(fs::read(a.join(&name).join(&f)).unwrap(), fs::read(b.join(&name).join(&f)).unwrap());
        }
    }
}

#[test]
fn flag_errors_exit_2() {
    let tmp = TempDir::new().unwrap();
    let out = run(&["scenegen", "--res", "30", "--patch", "8", "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not divisible"));
    assert_eq!(run(&["scenegen"]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    let bad = bin()
        .env("STREAMPOINT_THREADS", "zero")
        .args(["scenegen", "--out", s(tmp.path())])
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
    let policy = run(&["bench", "--policies", "window:0", "--out", s(tmp.path())]);
    assert_eq!(policy.status.code(), Some(2));
}

#[test]
fn zero_steps_keeps_initialization() {
    let tmp = TempDir::new().unwrap();
    let data = scenes(tmp.path(), 3, 1);
    let ckpt = trained(tmp.path(), &data, 0);
    let loaded = Checkpoint::load(&ckpt).unwrap();
    let init = ParamStore::init(&small_model(), 0).unwrap().cast::<f32>();
    assert_eq!(loaded.params, init);
    let log = fs::read_to_string(ckpt.with_file_name("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1);
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(ckpt.with_file_name("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["config"]["model"]["dim"], 16);
}

fn stream(ckpt: &Path, scene: &Path, policy: &str, dump: &Path, stats: &Path) {
    ok(&[
        "stream", "--ckpt", s(ckpt), "--scene", s(scene), "--policy", policy, "--dump-pred", s(dump), "--stats",
        s(stats),
    ]);
}

#[test]
fn stream_matches_batched_reference() {
    let tmp = TempDir::new().unwrap();
    let data = scenes(tmp.path(), 10, 1);
    let ckpt = trained(tmp.path(), &data, 3);
    let scene = data.join("scene_0000");
    let causal = tmp.path().join("causal");
    stream(&ckpt, &scene, "causal", &causal, &tmp.path().join("causal.csv"));

    let params = Checkpoint::load(&ckpt).unwrap().params;
    let seq = read_dataset(&scene).unwrap();
    let rgb: Vec<&[f32]> = seq.frames.iter().map(|f| f.rgb.as_slice()).collect();
    let mut g = Graph::new(&params, false);
    let pyr = batched_forward(&mut g, &rgb, CachePolicy::FullCausal).unwrap();
    let heads = run_heads(&mut g, &pyr.levels, rgb.len()).unwrap();
    let reference = heads.predictions(&g, 1).unwrap();
    for r in &reference {
        let p = read_prediction(&causal, r.frame, 16, 16).unwrap();
        let diff = p
            .x_local
            .data
            .iter()
            .zip(&r.x_local.data)
            .chain(p.x_global.data.iter().zip(&r.x_global.data))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(diff < 1e-5, "frame {}: {diff}", r.frame);
    }

    let wide = tmp.path().join("wide");
    stream(&ckpt, &scene, "window:1000", &wide, &tmp.path().join("wide.csv"));
    for t in 1..=10 {
        let name = format!("pred_{t:04}.f32");
        assert_eq!(fs::read(causal.join(&name)).unwrap(), fs::read(wide.join(&name)).unwrap());
    }

    let win = tmp.path().join("win");
    let stats = tmp.path().join("win.csv");
    stream(&ckpt, &scene, "window:5", &win, &stats);
    let text = fs::read_to_string(&stats).unwrap();
    let rows: Vec<Vec<String>> = text.lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect();
    assert_eq!(rows.len(), 10);
    let attended: Vec<usize> = rows.iter().map(|r| r[3].parse().unwrap()).collect();
    assert!(attended[6..].iter().all(|&a| a == attended[6]), "{attended:?}");
    for r in &rows {
        assert!(r[4].parse::<usize>().unwrap() <= r[5].parse::<usize>().unwrap());
    }
    assert!(win.join("run_manifest.json").exists());

    let fa = tmp.path().join("fa");
    let fa_stats = tmp.path().join("fa.csv");
    stream(&ckpt, &scene, "fa", &fa, &fa_stats);
    let revisits = fs::read_to_string(&fa_stats).unwrap().lines().filter(|l| l.contains(",revisit,")).count();
    assert_eq!(revisits, 10);
}

#[test]
fn stream_rejects_mismatched_scene() {
    let tmp = TempDir::new().unwrap();
    let data = scenes(tmp.path(), 3, 1);
    let ckpt = trained(tmp.path(), &data, 0);
    let other = tmp.path().join("big");
    ok(&["scenegen", "--frames", "2", "--res", "24", "--out", s(&other)]);
    let out = run(&["stream", "--ckpt", s(&ckpt), "--scene", s(&other.join("scene_0000"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("shape mismatch"));
}

#[test]
fn eval_on_oracle_predictions_is_perfect() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("scenes");
    ok(&["scenegen", "--seed", "2", "--frames", "4", "--out", s(&data)]);
    let scene = data.join("scene_0000");
    let seq = read_dataset(&scene).unwrap();
    let pred = tmp.path().join("pred");
    fs::create_dir_all(&pred).unwrap();
    for p in streampoint::eval::oracle_predictions(&seq) {
        streampoint::heads::write_prediction(&pred, &p).unwrap();
    }
    ok(&["eval", "--scene", s(&scene), "--pred", s(&pred)]);
    let m: serde_json::Value = serde_json::from_slice(&fs::read(pred.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(m["depth"]["abs_rel"], 0.0);
    assert_eq!(m["depth"]["delta_125"], 1.0);
    assert_eq!(m["pose"]["ate"], 0.0);
    assert_eq!(m["recon"]["acc_mean"], 0.0);
    assert_eq!(m["recon"]["nc_mean"], 1.0);
    assert!(pred.join("run_manifest.json").exists());
    let missing = run(&["eval", "--scene", s(&scene), "--pred", s(tmp.path())]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn bench_reports_policy_scaling() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("bench.json");
    fs::write(&cfg, serde_json::to_vec(&serde_json::json!({ "model": small_model() })).unwrap()).unwrap();
    let out = tmp.path().join("bench");
    ok(&[
        "bench", "--config", s(&cfg), "--frames", "4,12", "--policies", "window:2,causal", "--out", s(&out),
    ]);
    let k = small_model().tokens_per_frame();
    let csv = fs::read_to_string(out.join("bench.csv")).unwrap();
    let mut last = std::collections::HashMap::new();
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        last.insert((f[0].to_string(), f[1].to_string()), f[3].parse::<usize>().unwrap());
    }
    assert_eq!(last[&("window:2".into(), "4".into())], 3 * k);
    assert_eq!(last[&("window:2".into(), "12".into())], 3 * k);
    assert_eq!(last[&("causal".into(), "4".into())], 3 * k);
    assert_eq!(last[&("causal".into(), "12".into())], 11 * k);
    assert!(out.join("bench_summary.json").exists());
}
