//! Confidence-weighted, scale-normalized pointmap regression and pose loss.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraPose, Pointmap};
use crate::heads::{HeadOutputs, PointmapPrediction};
use crate::model::Graph;
use crate::numerics::{Real, Tensor, Var};
use crate::scenegen::SceneSequence;

/// How the pointmap normalizer is pooled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// One normalizer over all frames of the sequence.
    #[default]
    PerSequence,
    PerFrame,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    pub lambda_pose: f64,
    pub scale_mode: ScaleMode,
    /// Use the ground-truth normalizer for predictions too. `None` follows
    /// the sequence's own metric flag.
    pub metric: Option<bool>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.2,
            lambda_pose: 1.0,
            scale_mode: ScaleMode::PerSequence,
            metric: None,
        }
    }
}

/// Ground-truth and predicted normalizers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormScale {
    pub s_gt: f64,
    pub s_pred: f64,
    pub metric: bool,
}

impl NormScale {
    /// In metric mode `s_pred` is replaced by `s_gt`.
    pub fn new(s_gt: f64, s_pred: f64, metric: bool) -> Result<Self> {
        if !(s_gt > 0.0 && s_gt.is_finite()) {
            return Err(Error::Degenerate(format!("ground-truth scale {s_gt}")));
        }
        let s_pred = if metric { s_gt } else { s_pred };
        if !(s_pred > 0.0 && s_pred.is_finite()) {
            return Err(Error::Degenerate(format!("predicted scale {s_pred}")));
        }
        Ok(NormScale { s_gt, s_pred, metric })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub conf_local: f64,
    pub conf_global: f64,
    pub pose_q: f64,
    pub pose_tau: f64,
    pub pose_f: f64,
    pub mean_conf_local: f64,
    pub mean_conf_global: f64,
}

impl LossReport {
    pub fn pose(&self) -> f64 {
        self.pose_q + self.pose_tau + self.pose_f
    }

    pub fn conf(&self) -> f64 {
        self.conf_local + self.conf_global
    }

    pub fn is_finite(&self) -> bool {
        [
            self.total,
            self.conf_local,
            self.conf_global,
            self.pose_q,
            self.pose_tau,
            self.pose_f,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Mean distance to the origin over valid pixels of one or more pointmaps.
pub fn scale_factor(points: &[&Pointmap], valid: &[&[bool]]) -> Result<f64> {
    if points.len() != valid.len() {
        return Err(Error::Shape("one mask per pointmap".into()));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (pm, m) in points.iter().zip(valid) {
        if m.len() != pm.len() {
            return Err(Error::Shape(format!("mask of {} for {} pixels", m.len(), pm.len())));
        }
        for (i, _) in m.iter().enumerate().filter(|(_, &v)| v) {
            sum += pm.point(i).norm();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Degenerate("no valid points for scale".into()));
    }
    Ok(sum / n as f64)
}

/// Sum over valid pixels of `c * |x̂/ŝ - x/s| - alpha * ln c`.
pub fn conf_loss(
    pred: &Pointmap,
    conf: &[f32],
    gt: &Pointmap,
    mask: &[bool],
    scales: &NormScale,
    alpha: f64,
) -> Result<f64> {
    if pred.len() != gt.len() || conf.len() != pred.len() || mask.len() != pred.len() {
        return Err(Error::Shape("conf_loss inputs differ in size".into()));
    }
    let mut total = 0.0;
    for i in (0..pred.len()).filter(|&i| mask[i]) {
        let c = conf[i] as f64;
        if !(c > 0.0) {
            return Err(Error::Contract(format!("non-positive confidence {c} at pixel {i}")));
        }
        let r = (pred.point(i) / scales.s_pred - gt.point(i) / scales.s_gt).norm();
        total += c * r - alpha * c.ln();
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PoseTerms {
    pub q: f64,
    pub tau: f64,
    pub f: f64,
}

impl PoseTerms {
    pub fn sum(&self) -> f64 {
        self.q + self.tau + self.f
    }
}

/// Quaternion, normalized translation and width-normalized focal errors.
pub fn pose_loss(pred: &CameraPose, gt: &CameraPose, scales: &NormScale, width: usize) -> PoseTerms {
    let (a, b) = (pred.q.canonical().to_array(), gt.q.canonical().to_array());
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let w = width as f64;
    PoseTerms {
        q: norm(&mut (0..4).map(|i| a[i] - b[i])),
        tau: norm(&mut (0..3).map(|i| pred.tau[i] / scales.s_pred - gt.tau[i] / scales.s_gt)),
        f: norm(&mut (0..2).map(|i| pred.f[i] / w - gt.f[i] / w)),
    }
}

fn is_metric(cfg: &LossConfig, seq: &SceneSequence) -> bool {
    cfg.metric.unwrap_or(seq.metric_scale)
}

/// Ground-truth normalizers: one per frame, repeated under `PerSequence`.
fn gt_scales(seq: &SceneSequence, mode: ScaleMode) -> Result<Vec<f64>> {
    match mode {
        ScaleMode::PerSequence => {
            let pts: Vec<&Pointmap> = seq.frames.iter().map(|f| &f.ptmap_global).collect();
            let masks: Vec<&[bool]> = seq.frames.iter().map(|f| f.valid.as_slice()).collect();
            Ok(vec![scale_factor(&pts, &masks)?; seq.frames.len()])
        }
        ScaleMode::PerFrame => seq
            .frames
            .iter()
            .map(|f| scale_factor(&[&f.ptmap_global], &[&f.valid]))
            .collect(),
    }
}

/// Reference evaluation of the full objective on concrete predictions.
pub fn total_loss(preds: &[PointmapPrediction], seq: &SceneSequence, cfg: &LossConfig) -> Result<LossReport> {
    if preds.len() != seq.frames.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} frames",
            preds.len(),
            seq.frames.len()
        )));
    }
    let metric = is_metric(cfg, seq);
    let s_gt = gt_scales(seq, cfg.scale_mode)?;
    let s_pred = match cfg.scale_mode {
        ScaleMode::PerSequence => {
            let pts: Vec<&Pointmap> = preds.iter().map(|p| &p.x_global).collect();
            let masks: Vec<&[bool]> = seq.frames.iter().map(|f| f.valid.as_slice()).collect();
            vec![scale_factor(&pts, &masks)?; preds.len()]
        }
        ScaleMode::PerFrame => preds
            .iter()
            .zip(&seq.frames)
            .map(|(p, f)| scale_factor(&[&p.x_global], &[&f.valid]))
            .collect::<Result<_>>()?,
    };
    let mut r = LossReport::default();
    let mut n_valid = 0usize;
    let mut conf_sum = [0.0; 2];
    for (i, (p, f)) in preds.iter().zip(&seq.frames).enumerate() {
        let scales = NormScale::new(s_gt[i], s_pred[i], metric)?;
        r.conf_local += conf_loss(&p.x_local, &p.c_local, &f.ptmap_local, &f.valid, &scales, cfg.alpha)?;
        r.conf_global += conf_loss(&p.x_global, &p.c_global, &f.ptmap_global, &f.valid, &scales, cfg.alpha)?;
        let t = pose_loss(&p.pose, &f.pose, &scales, f.width);
        r.pose_q += t.q;
        r.pose_tau += t.tau;
        r.pose_f += t.f;
        for (j, _) in f.valid.iter().enumerate().filter(|(_, &v)| v) {
            conf_sum[0] += p.c_local[j] as f64;
            conf_sum[1] += p.c_global[j] as f64;
        }
        n_valid += f.valid_count();
    }
    let nv = n_valid as f64;
    r.conf_local /= nv;
    r.conf_global /= nv;
    r.mean_conf_local = conf_sum[0] / nv;
    r.mean_conf_global = conf_sum[1] / nv;
    r.total = r.conf_local + r.conf_global + cfg.lambda_pose * r.pose();
    Ok(r)
}

fn constant_rows<T: Real>(g: &mut Graph<'_, T>, rows: usize, cols: usize, f: impl Fn(usize) -> f64) -> Result<Var> {
    let t = Tensor::new(vec![rows, cols], (0..rows * cols).map(|i| T::of(f(i))).collect())?;
    Ok(g.constant(t))
}

/// Divides each frame's block of `rows_per_frame` rows by its scale.
fn divide_per_frame<T: Real>(g: &mut Graph<'_, T>, x: Var, scales: &[Var], rows_per_frame: usize) -> Result<Var> {
    if scales.windows(2).all(|w| w[0] == w[1]) {
        return g.div_scalar(x, scales[0]);
    }
    let parts = scales
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let p = g.slice_rows(x, i * rows_per_frame, (i + 1) * rows_per_frame)?;
            g.div_scalar(p, s)
        })
        .collect::<Result<Vec<_>>>()?;
    g.concat_rows(&parts)
}

/// Differentiable objective on stacked head outputs for `seq`.
pub fn total_loss_graph<T: Real>(
    g: &mut Graph<'_, T>,
    heads: &HeadOutputs,
    seq: &SceneSequence,
    cfg: &LossConfig,
) -> Result<(Var, LossReport)> {
    let n = seq.frames.len();
    if heads.n_frames != n {
        return Err(Error::Shape(format!("{} predicted frames for {n}", heads.n_frames)));
    }
    let (h, w) = seq.resolution();
    let hw = h * w;
    if g.shape(heads.x_local) != [n * hw, 3] {
        return Err(Error::Shape(format!(
            "prediction {:?} for {n} frames of {h}x{w}",
            g.shape(heads.x_local)
        )));
    }
    let metric = is_metric(cfg, seq);
    let s_gt = gt_scales(seq, cfg.scale_mode)?;
    let valid: Vec<bool> = seq.frames.iter().flat_map(|f| f.valid.iter().copied()).collect();
    let n_valid = valid.iter().filter(|&&v| v).count();
    if n_valid == 0 {
        return Err(Error::Degenerate("sequence has no valid pixels".into()));
    }

    let s_pred: Vec<Var> = if metric {
        let mut v = Vec::with_capacity(n);
        for &s in &s_gt {
            v.push(g.constant(Tensor::scalar(T::of(s))));
        }
        v
    } else {
        let norms = g.row_norms(heads.x_global)?;
        match cfg.scale_mode {
            ScaleMode::PerSequence => {
                let wts: Rc<[T]> = valid
                    .iter()
                    .map(|&v| if v { T::of(1.0 / n_valid as f64) } else { T::zero() })
                    .collect();
                let s = g.weighted_sum(norms, wts)?;
                vec![s; n]
            }
            ScaleMode::PerFrame => (0..n)
                .map(|i| {
                    let cnt = seq.frames[i].valid_count();
                    if cnt == 0 {
                        return Err(Error::Degenerate(format!("frame {} has no valid pixels", i + 1)));
                    }
                    let wts: Rc<[T]> = (0..n * hw)
                        .map(|j| {
                            if j / hw == i && valid[j] {
                                T::of(1.0 / cnt as f64)
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    g.weighted_sum(norms, wts)
                })
                .collect::<Result<_>>()?,
        }
    };
    for &s in &s_pred {
        let v = g.value(s).data()[0].f64();
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::Degenerate(format!("predicted scale {v}")));
        }
    }

    let pixel_weights: Rc<[T]> = valid
        .iter()
        .map(|&v| if v { T::of(1.0 / n_valid as f64) } else { T::zero() })
        .collect();
    let alpha = T::of(cfg.alpha);
    let branch = |g: &mut Graph<'_, T>, x: Var, c: Var, local: bool| -> Result<(Var, f64)> {
        let gt = constant_rows(g, n * hw, 3, |i| {
            let (fi, rest) = (i / (hw * 3), i % (hw * 3));
            let f = &seq.frames[fi];
            let pm = if local { &f.ptmap_local } else { &f.ptmap_global };
            pm.data[rest] as f64 / s_gt[fi]
        })?;
        let xn = divide_per_frame(g, x, &s_pred, hw)?;
        let d = g.sub(xn, gt)?;
        let r = g.row_norms(d)?;
        let cr = g.mul(c, r)?;
        let lc = g.log(c)?;
        let reg = g.scale(lc, alpha);
        let term = g.sub(cr, reg)?;
        let loss = g.weighted_sum(term, pixel_weights.clone())?;
        let mean_c = g
            .value(c)
            .data()
            .iter()
            .zip(valid.iter())
            .filter(|(_, &v)| v)
            .map(|(c, _)| c.f64())
            .sum::<f64>()
            / n_valid as f64;
        Ok((loss, mean_c))
    };
    let (conf_local, mc_local) = branch(g, heads.x_local, heads.c_local, true)?;
    let (conf_global, mc_global) = branch(g, heads.x_global, heads.c_global, false)?;

    let q_gt = constant_rows(g, n, 4, |i| seq.frames[i / 4].pose.q.canonical().to_array()[i % 4])?;
    let dq = g.sub(heads.q, q_gt)?;
    let dq = g.row_norms(dq)?;
    let pose_q = g.sum(dq);

    let tau_gt = constant_rows(g, n, 3, |i| seq.frames[i / 3].pose.tau[i % 3] / s_gt[i / 3])?;
    let tn = divide_per_frame(g, heads.tau, &s_pred, 1)?;
    let dt = g.sub(tn, tau_gt)?;
    let dt = g.row_norms(dt)?;
    let pose_tau = g.sum(dt);

    let f_gt = constant_rows(g, n, 2, |i| seq.frames[i / 2].pose.f[i % 2] / w as f64)?;
    let fn_ = g.scale(heads.f, T::of(1.0 / w as f64));
    let df = g.sub(fn_, f_gt)?;
    let df = g.row_norms(df)?;
    let pose_f = g.sum(df);

    let pose = g.add(pose_q, pose_tau)?;
    let pose = g.add(pose, pose_f)?;
    let pose = g.scale(pose, T::of(cfg.lambda_pose));
    let conf = g.add(conf_local, conf_global)?;
    let total = g.add(conf, pose)?;

    let val = |g: &Graph<'_, T>, v: Var| g.value(v).data()[0].f64();
    let report = LossReport {
        total: val(g, total),
        conf_local: val(g, conf_local),
        conf_global: val(g, conf_global),
        pose_q: val(g, pose_q),
        pose_tau: val(g, pose_tau),
        pose_f: val(g, pose_f),
        mean_conf_local: mc_local,
        mean_conf_global: mc_global,
    };
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::{batched_forward, CachePolicy};
    use crate::geometry::{FrameOfReference, Quat};
    use crate::heads::run_heads;
    use crate::model::{ModelConfig, ParamStore};
    use crate::scenegen::{generate_scene, SceneConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pm(data: Vec<f32>) -> Pointmap {
        let n = data.len() / 3;
        Pointmap::new(1, n, FrameOfReference::Global, data).unwrap()
    }

    #[test]
    fn scale_factor_examples() {
        let p = pm(vec![2.0, 0.0, 0.0, 0.0, -2.0, 0.0, 0.0, 0.0, 9.0]);
        assert_eq!(scale_factor(&[&p], &[&[true, true, false]]).unwrap(), 2.0);
        assert!(matches!(scale_factor(&[&p], &[&[false; 3]]), Err(Error::Degenerate(_))));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f32> = (0..300).map(|_| rng.random::<f32>() * 4.0 - 2.0).collect();
        let mask: Vec<bool> = (0..100).map(|i| i % 3 != 0).collect();
        let p = pm(data.clone());
        let mut brute = 0.0;
        let mut n = 0.0;
        for i in 0..100 {
            if mask[i] {
                let (x, y, z) = (data[3 * i] as f64, data[3 * i + 1] as f64, data[3 * i + 2] as f64);
                brute += (x * x + y * y + z * z).sqrt();
                n += 1.0;
            }
        }
        assert!((scale_factor(&[&p], &[&mask]).unwrap() - brute / n).abs() < 1e-6);
        let scaled = pm(data.iter().map(|v| v * 3.0).collect());
        let ratio = scale_factor(&[&scaled], &[&mask]).unwrap() / scale_factor(&[&p], &[&mask]).unwrap();
        assert!((ratio - 3.0).abs() < 1e-6);
    }

    #[test]
    fn conf_loss_examples() {
        let s = NormScale::new(1.0, 1.0, false).unwrap();
        let x = pm(vec![1.0, 2.0, 3.0]);
        assert_eq!(conf_loss(&x, &[1.0], &x, &[true], &s, 0.2).unwrap(), 0.0);
        let y = pm(vec![1.5, 2.0, 3.0]);
        let l = conf_loss(&y, &[2.0], &x, &[true], &s, 0.2).unwrap();
        assert!((l - (2.0 * 0.5 - 0.2 * 2f64.ln())).abs() < 1e-12);
        assert!((l - 0.861370).abs() < 1e-6);
        assert!(matches!(conf_loss(&y, &[0.0], &x, &[true], &s, 0.2), Err(Error::Contract(_))));
        assert_eq!(NormScale::new(2.0, 5.0, true).unwrap().s_pred, 2.0);
    }

    #[test]
    fn conf_minimizer_is_alpha_over_r() {
        let (r, alpha) = (0.37, 0.2);
        let f = |c: f64| c * r - alpha * c.ln();
        let c0 = alpha / r;
        for dc in [-0.1, -0.01, 0.01, 0.1] {
            assert!(f(c0 + dc) > f(c0));
        }
    }

    #[test]
    fn pose_loss_examples() {
        let s = NormScale::new(2.0, 2.0, false).unwrap();
        let a = CameraPose::new(Quat::new(0.9, 0.1, -0.3, 0.2), [1.0, 0.0, 0.0], [30.0, 30.0]).unwrap();
        assert_eq!(pose_loss(&a, &a, &s, 32).sum(), 0.0);
        let flipped = CameraPose {
            q: Quat::new(-a.q.w, -a.q.x, -a.q.y, -a.q.z),
            ..a
        };
        assert_eq!(pose_loss(&flipped, &a, &s, 32).sum(), 0.0);
        let b = CameraPose { tau: [0.0; 3], ..a };
        assert!((pose_loss(&b, &a, &s, 32).sum() - 0.5).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn non_metric_conf_loss_is_scale_invariant(
            lp in 0.01f64..50.0,
            lg in 0.01f64..50.0,
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<f32> = (0..60).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect();
            let b: Vec<f32> = (0..60).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect();
            let c: Vec<f32> = (0..20).map(|_| 1.0 + rng.random::<f32>()).collect();
            let mask = vec![true; 20];
            let eval = |ka: f64, kb: f64| {
                let pa = pm(a.iter().map(|v| (*v as f64 * ka) as f32).collect());
                let pb = pm(b.iter().map(|v| (*v as f64 * kb) as f32).collect());
                let s = NormScale::new(
                    scale_factor(&[&pb], &[&mask]).unwrap(),
                    scale_factor(&[&pa], &[&mask]).unwrap(),
                    false,
                ).unwrap();
                conf_loss(&pa, &c, &pb, &mask, &s, 0.2).unwrap()
            };
            let base = eval(1.0, 1.0);
            prop_assert!((eval(lp, lg) - base).abs() < 1e-5 * base.abs().max(1.0));
        }
    }

    fn toy() -> (ModelConfig, SceneSequence) {
        let cfg = ModelConfig {
            height: 16,
            width: 16,
            patch_size: 8,
            dim: 16,
            heads: 2,
            encoder_depth: 1,
            decoder_depth: 2,
            ..Default::default()
        };
        let seq = generate_scene(
            3,
            &SceneConfig {
                n_frames: 2,
                height: 16,
                width: 16,
                ..Default::default()
            },
        )
        .unwrap();
        (cfg, seq)
    }

    #[test]
    fn graph_loss_matches_reference_evaluation() {
        let (cfg, seq) = toy();
        let params = ParamStore::init(&cfg, 4).unwrap();
        for mode in [ScaleMode::PerSequence, ScaleMode::PerFrame] {
            for metric in [Some(false), Some(true)] {
                let lc = LossConfig {
                    scale_mode: mode,
                    metric,
                    ..Default::default()
                };
                let mut g = Graph::new(&params, true);
                let rgb: Vec<&[f32]> = seq.frames.iter().map(|f| f.rgb.as_slice()).collect();
                let pyr = batched_forward(&mut g, &rgb, CachePolicy::FullCausal).unwrap();
                let heads = run_heads(&mut g, &pyr.levels, 2).unwrap();
                let (_, rep) = total_loss_graph(&mut g, &heads, &seq, &lc).unwrap();
                let preds = heads.predictions(&g, 1).unwrap();
                let reference = total_loss(&preds, &seq, &lc).unwrap();
                // Predictions pass through f32 dumps, so agreement is to f32 precision.
                for (a, b) in [
                    (rep.total, reference.total),
                    (rep.conf_local, reference.conf_local),
                    (rep.conf_global, reference.conf_global),
                    (rep.pose_q, reference.pose_q),
                    (rep.pose_tau, reference.pose_tau),
                    (rep.pose_f, reference.pose_f),
                ] {
                    assert!((a - b).abs() < 1e-5 * b.abs().max(1.0), "{mode:?} {metric:?}: {a} vs {b}");
                }
            }
        }
    }

    fn oracle(seq: &SceneSequence, conf: f32) -> Vec<PointmapPrediction> {
        seq.frames
            .iter()
            .map(|f| PointmapPrediction {
                frame: f.index,
                x_local: f.ptmap_local.clone(),
                c_local: vec![conf; f.valid.len()],
                x_global: f.ptmap_global.clone(),
                c_global: vec![conf; f.valid.len()],
                pose: f.pose,
            })
            .collect()
    }

    #[test]
    fn oracle_predictions_cost_nothing() {
        let (_, seq) = toy();
        let r = total_loss(&oracle(&seq, 1.0), &seq, &LossConfig::default()).unwrap();
        assert_eq!(r.conf(), 0.0);
        assert_eq!(r.pose(), 0.0);
        assert!(matches!(
            total_loss(&oracle(&seq, 1.0)[..1], &seq, &LossConfig::default()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn per_pixel_normalization_ignores_valid_count() {
        let (_, seq) = toy();
        let mut preds = oracle(&seq, 2.0);
        for p in &mut preds {
            p.x_local.data.iter_mut().for_each(|v| *v *= 1.1);
        }
        let once = total_loss(&preds, &seq, &LossConfig::default()).unwrap();
        let mut twice = seq.clone();
        twice.frames.extend(seq.frames.iter().cloned());
        let mut preds2 = preds.clone();
        preds2.extend(preds.iter().cloned());
        let again = total_loss(&preds2, &twice, &LossConfig::default()).unwrap();
        assert!((once.conf_local - again.conf_local).abs() < 1e-12);
    }

    #[test]
    fn metric_mode_breaks_invariance() {
        let (_, seq) = toy();
        let lc = LossConfig {
            metric: Some(true),
            ..Default::default()
        };
        let base = total_loss(&oracle(&seq, 1.5), &seq, &lc).unwrap();
        let mut scaled = oracle(&seq, 1.5);
        for p in &mut scaled {
            p.x_global.data.iter_mut().for_each(|v| *v *= 3.0);
        }
        assert!(total_loss(&scaled, &seq, &lc).unwrap().conf_global > base.conf_global);
        let free = total_loss(&scaled, &seq, &LossConfig::default()).unwrap();
        assert!((free.conf_global - base.conf_global).abs() < 1e-6);
    }
}
