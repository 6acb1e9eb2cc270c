use nalgebra::Vector3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::geometry::{quat_to_matrix, FrameOfReference};
use crate::heads::write_prediction;
use crate::scenegen::{generate_scene, write_dataset, SceneConfig, Trajectory};

fn random_quat(rng: &mut impl Rng) -> Quat {
    Quat::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    )
    .normalized()
    .unwrap()
}

fn random_sim3(rng: &mut impl Rng) -> Sim3 {
    Sim3 {
        scale: rng.random_range(0.2..5.0),
        rotation: quat_to_matrix(random_quat(rng)).unwrap(),
        translation: Vector3::new(
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
        ),
    }
}

fn trajectory(rng: &mut impl Rng, n: usize) -> Vec<CameraPose> {
    (0..n)
        .map(|_| {
            CameraPose::new(
                random_quat(rng),
                std::array::from_fn(|_| rng.random_range(-2.0..2.0)),
                [30.0, 30.0],
            )
            .unwrap()
        })
        .collect()
}

fn apply_sim3(sim: &Sim3, pose: &CameraPose) -> CameraPose {
    let q = Quat::from_matrix(&sim.rotation).mul(pose.q).canonical();
    let c = sim.apply(pose.translation());
    CameraPose::new(q, [c.x, c.y, c.z], pose.f).unwrap()
}

#[test]
fn depth_examples() {
    let gt = [1.0f32, 2.0, 4.0, 8.0];
    let mask = [true; 4];
    let run = |pred: &[f32], mode| depth_metrics(&[pred], &[&gt], &[&mask], mode).unwrap();

    let twice: Vec<f32> = gt.iter().map(|d| 2.0 * d).collect();
    let m = run(&twice, DepthAlignment::PerFrameMedian);
    assert_eq!((m.abs_rel, m.delta_125), (0.0, 1.0));
    let m = run(&twice, DepthAlignment::PerSequenceScale);
    assert_eq!((m.abs_rel, m.delta_125), (0.0, 1.0));

    let gt64 = [1.0f32, 2.0, 4.0, 8.0];
    let more: Vec<f32> = gt64.iter().map(|d| 1.1 * d).collect();
    let m = depth_metrics(&[&more], &[&gt64], &[&mask], DepthAlignment::MetricNone).unwrap();
    assert!((m.abs_rel - 0.1).abs() < 1e-6, "{}", m.abs_rel);
    assert_eq!(m.delta_125, 1.0);

    let edge: Vec<f32> = gt.iter().map(|d| 1.25 * d).collect();
    assert_eq!(run(&edge, DepthAlignment::MetricNone).delta_125, 0.0);

    let zero = [0.0f32; 4];
    assert!(matches!(
        depth_metrics(&[&zero], &[&gt], &[&mask], DepthAlignment::PerFrameMedian),
        Err(Error::Degenerate(_))
    ));
    let none = [false; 4];
    assert!(depth_metrics(&[&twice], &[&gt], &[&none], DepthAlignment::MetricNone).is_err());
}

#[test]
fn masked_pixels_are_ignored() {
    let gt = [1.0f32, 2.0, 3.0];
    let pred = [1.0f32, 2.0, 100.0];
    let m = depth_metrics(&[&pred], &[&gt], &[&[true, true, false]], DepthAlignment::MetricNone).unwrap();
    assert_eq!((m.abs_rel, m.delta_125, m.pixels), (0.0, 1.0, 2));
}

proptest! {
    #[test]
    fn median_alignment_ignores_frame_scale(
        depths in prop::collection::vec(0.5f32..10.0, 8..40),
        noise in prop::collection::vec(0.8f32..1.2, 40),
        lambda in 0.01f32..100.0,
    ) {
        let mask = vec![true; depths.len()];
        let pred: Vec<f32> = depths.iter().zip(&noise).map(|(d, n)| d * n).collect();
        let scaled: Vec<f32> = pred.iter().map(|p| p * lambda).collect();
        let a = depth_metrics(&[&pred], &[&depths], &[&mask], DepthAlignment::PerFrameMedian).unwrap();
        let b = depth_metrics(&[&scaled], &[&depths], &[&mask], DepthAlignment::PerFrameMedian).unwrap();
        prop_assert!((a.abs_rel - b.abs_rel).abs() < 1e-6);
        prop_assert!((a.delta_125 - b.delta_125).abs() <= 1.0 / depths.len() as f64);
        prop_assert!(a.abs_rel >= 0.0 && (0.0..=1.0).contains(&a.delta_125));
    }

    #[test]
    fn depth_metrics_ignore_pixel_order(
        depths in prop::collection::vec((0.5f32..10.0, 0.5f32..10.0), 2..30),
        shift in 0usize..30,
    ) {
        let (p, g): (Vec<f32>, Vec<f32>) = depths.iter().copied().unzip();
        let mask = vec![true; p.len()];
        let k = shift % p.len();
        let (mut p2, mut g2) = (p.clone(), g.clone());
        p2.rotate_left(k);
        g2.rotate_left(k);
        let a = depth_metrics(&[&p], &[&g], &[&mask], DepthAlignment::PerSequenceScale).unwrap();
        let b = depth_metrics(&[&p2], &[&g2], &[&mask], DepthAlignment::PerSequenceScale).unwrap();
        prop_assert!((a.abs_rel - b.abs_rel).abs() < 1e-12);
        prop_assert_eq!(a.delta_125, b.delta_125);
    }
}

#[test]
fn pose_metrics_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let gt = trajectory(&mut rng, 6);
        let same = pose_metrics(&gt, &gt).unwrap();
        assert_eq!((same.ate, same.rpe_trans, same.rpe_rot), (0.0, 0.0, 0.0));

        let sim = random_sim3(&mut rng);
        let moved: Vec<CameraPose> = gt.iter().map(|p| apply_sim3(&sim, p)).collect();
        let m = pose_metrics(&moved, &gt).unwrap();
        assert!(m.ate < 1e-6 && m.rpe_trans < 1e-6 && m.rpe_rot < 1e-4, "{m:?}");

        let pred = trajectory(&mut rng, 6);
        let a = pose_metrics(&pred, &gt).unwrap();
        let moved: Vec<CameraPose> = pred.iter().map(|p| apply_sim3(&sim, p)).collect();
        let b = pose_metrics(&moved, &gt).unwrap();
        assert!((a.ate - b.ate).abs() < 1e-6);
        assert!((a.rpe_trans - b.rpe_trans).abs() < 1e-6);
        assert!((a.rpe_rot - b.rpe_rot).abs() < 1e-4);
    }
}

#[test]
fn single_rotated_pose_hits_two_motions() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let gt = trajectory(&mut rng, 7);
    let k = 3;
    let mut pred = gt.clone();
    pred[k] = perturb_rotation(&gt[k], Vector3::new(0.3, -1.0, 0.2), 5.0).unwrap();
    let m = pose_metrics(&pred, &gt).unwrap();
    for (i, e) in m.rpe_rot_pairs.iter().enumerate() {
        if i == k - 1 || i == k {
            assert!((e - 5.0).abs() < 1e-6, "pair {i}: {e}");
        } else {
            assert!(*e < 1e-6, "pair {i}: {e}");
        }
    }
    assert!((m.rpe_rot - 10.0 / 6.0).abs() < 1e-6);
}

#[test]
fn collinear_trajectory_is_rejected() {
    let line: Vec<CameraPose> = (0..5)
        .map(|i| CameraPose::new(Quat::IDENTITY, [0.0, 0.0, i as f64], [30.0, 30.0]).unwrap())
        .collect();
    assert!(matches!(pose_metrics(&line, &line), Err(Error::Degenerate(_))));
    assert!(matches!(pose_metrics(&line[..2], &line[..2]), Err(Error::Degenerate(_))));
}

fn random_cloud(rng: &mut impl Rng, n: usize) -> Cloud {
    let points = (0..n)
        .map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .collect();
    let normals = (0..n)
        .map(|_| {
            Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
                .normalize()
        })
        .collect();
    Cloud::new(points, normals).unwrap()
}

#[test]
fn recon_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let c = random_cloud(&mut rng, 150);
    let m = recon_metrics(&c, &c).unwrap();
    assert_eq!((m.acc_mean, m.comp_mean, m.nc_mean, m.nc_median), (0.0, 0.0, 1.0, 1.0));

    let up = Vector3::new(0.0, 0.0, 1.0);
    let a = Cloud::new(vec![Vector3::new(1.0, 2.0, 3.0)], vec![up]).unwrap();
    let b = Cloud::new(vec![Vector3::new(1.0, 2.0, 3.5)], vec![-up]).unwrap();
    let m = recon_metrics(&a, &b).unwrap();
    assert_eq!((m.acc_mean, m.comp_mean, m.nc_mean), (0.5, 0.5, 1.0));
    assert!(recon_metrics(&a, &Cloud::default()).is_err());
}

#[test]
fn recon_matches_brute_force_and_swaps() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10 {
        let n = rng.random_range(1..=200);
        let m = rng.random_range(1..=200);
        let p = random_cloud(&mut rng, n);
        let g = random_cloud(&mut rng, m);
        let r = recon_metrics(&p, &g).unwrap();
        let acc: Vec<f64> = p.points.iter().map(|q| brute_force_nearest(&g.points, q).1).collect();
        let comp: Vec<f64> = g.points.iter().map(|q| brute_force_nearest(&p.points, q).1).collect();
        assert_eq!(r.acc_mean, mean(&acc));
        assert_eq!(r.comp_mean, mean(&comp));
        let s = recon_metrics(&g, &p).unwrap();
        assert_eq!((r.acc_mean, r.acc_median), (s.comp_mean, s.comp_median));
        assert!((-1.0..=1.0).contains(&r.nc_mean));
    }
}

#[test]
fn plane_normals_are_constant() {
    let (h, w) = (5, 6);
    let data: Vec<f32> = (0..h * w)
        .flat_map(|i| {
            let (r, c) = ((i / w) as f32, (i % w) as f32);
            [c, r, 2.0 + 0.5 * c]
        })
        .collect();
    let pm = Pointmap::new(h, w, FrameOfReference::Global, data).unwrap();
    let mut mask = vec![true; h * w];
    mask[7] = false;
    let normals = grid_normals(&pm, &mask);
    let expect = Vector3::new(-0.5, 0.0, 1.0).normalize();
    for (i, n) in normals.iter().enumerate() {
        match n {
            Some(n) => assert!(n.dot(&expect).abs() > 1.0 - 1e-6),
            None => assert!(i == 7 || i == 6 || i == 1, "{i}"),
        }
    }
}

#[test]
fn oracle_sequence_is_perfect() {
    for trajectory in [Trajectory::Orbit, Trajectory::RandomWalk] {
        let seq = generate_scene(11, &SceneConfig { trajectory, ..Default::default() }).unwrap();
        let r = evaluate_sequence(&seq, &oracle_predictions(&seq), &EvalConfig::default()).unwrap();
        let d = r.depth.unwrap();
        assert_eq!((d.abs_rel, d.delta_125), (0.0, 1.0));
        let p = r.pose.unwrap();
        assert_eq!((p.ate, p.rpe_trans, p.rpe_rot), (0.0, 0.0, 0.0));
        let c = r.recon.unwrap();
        assert_eq!((c.acc_mean, c.comp_mean, c.nc_mean), (0.0, 0.0, 1.0));
        assert!(r.provenance.skipped.is_empty());
    }
}

#[test]
fn degenerate_trajectory_is_noted_not_fatal() {
    let seq = generate_scene(12, &SceneConfig { trajectory: Trajectory::Dolly, ..Default::default() }).unwrap();
    let r = evaluate_sequence(&seq, &oracle_predictions(&seq), &EvalConfig::default()).unwrap();
    assert!(r.depth.is_some() && r.recon.is_some());
    if r.pose.is_none() {
        assert!(r.provenance.skipped.iter().any(|s| s.starts_with("pose")));
    }
}

#[test]
fn evaluates_from_disk() {
    let seq = generate_scene(13, &SceneConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("scene");
    let preds = dir.path().join("pred");
    write_dataset(&seq, &data).unwrap();
    std::fs::create_dir_all(&preds).unwrap();
    for p in oracle_predictions(&seq) {
        write_prediction(&preds, &p).unwrap();
    }
    let r = evaluate_dirs(&data, &preds, &EvalConfig::default()).unwrap();
    assert_eq!(r.depth.as_ref().unwrap().abs_rel, 0.0);
    let out = dir.path().join("metrics.json");
    r.write(&out).unwrap();
    let back: MetricsReport = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!(back, r);
}
