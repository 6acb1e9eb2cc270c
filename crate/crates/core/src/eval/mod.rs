//! Depth, trajectory and reconstruction metrics.

mod nn;

use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{quat_geodesic_deg, umeyama_sim3, CameraPose, Pointmap, Quat, Sim3};
use crate::heads::{read_prediction, PointmapPrediction};
use crate::scenegen::{read_dataset, SceneSequence};

pub use nn::{brute_force_nearest, NearestIndex};

type V3 = Vector3<f64>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DepthAlignment {
    /// Each frame scaled by `median(gt) / median(pred)`.
    #[default]
    PerFrameMedian,
    /// One scale per sequence, the median of `gt / pred` over valid pixels.
    PerSequenceScale,
    /// Raw predictions.
    MetricNone,
}

impl std::str::FromStr for DepthAlignment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-frame-median" | "median" => Ok(Self::PerFrameMedian),
            "per-sequence-scale" | "sequence" => Ok(Self::PerSequenceScale),
            "metric-none" | "none" => Ok(Self::MetricNone),
            _ => Err(Error::Config(format!("unknown depth alignment {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    /// Fraction of pixels with `max(d̂/d, d/d̂) < 1.25`.
    pub delta_125: f64,
    pub alignment: DepthAlignment,
    /// Scale applied to each frame's prediction.
    pub scales: Vec<f64>,
    pub pixels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseMetrics {
    pub ate: f64,
    pub rpe_trans: f64,
    /// Degrees.
    pub rpe_rot: f64,
    pub rpe_trans_pairs: Vec<f64>,
    pub rpe_rot_pairs: Vec<f64>,
    pub alignment: Sim3Record,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconMetrics {
    pub acc_mean: f64,
    pub acc_median: f64,
    pub comp_mean: f64,
    pub comp_median: f64,
    pub nc_mean: f64,
    pub nc_median: f64,
}

/// Serializable form of a similarity transform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sim3Record {
    pub scale: f64,
    /// Row-major.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl From<&Sim3> for Sim3Record {
    fn from(s: &Sim3) -> Self {
        Sim3Record {
            scale: s.scale,
            rotation: std::array::from_fn(|r| std::array::from_fn(|c| s.rotation[(r, c)])),
            translation: [s.translation.x, s.translation.y, s.translation.z],
        }
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn valid_pairs<'a>(pred: &'a [f32], gt: &'a [f32], mask: &'a [bool]) -> impl Iterator<Item = (f64, f64)> + 'a {
    pred.iter()
        .zip(gt)
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((&p, &g), _)| (p as f64, g as f64))
}

/// Abs Rel and δ<1.25 over every valid pixel of every frame.
pub fn depth_metrics(
    pred: &[&[f32]],
    gt: &[&[f32]],
    masks: &[&[bool]],
    mode: DepthAlignment,
) -> Result<DepthMetrics> {
    if pred.len() != gt.len() || pred.len() != masks.len() || pred.is_empty() {
        return Err(Error::Shape(format!(
            "depth_metrics: {} predictions, {} targets, {} masks",
            pred.len(),
            gt.len(),
            masks.len()
        )));
    }
    for (i, ((p, g), m)) in pred.iter().zip(gt).zip(masks).enumerate() {
        if p.len() != g.len() || p.len() != m.len() {
            return Err(Error::Shape(format!("depth_metrics: frame {i} length mismatch")));
        }
        if !m.iter().any(|&v| v) {
            return Err(Error::Contract(format!("depth_metrics: frame {i} has no valid pixel")));
        }
        if valid_pairs(p, g, m).any(|(_, d)| !(d > 0.0)) {
            return Err(Error::Contract(format!("depth_metrics: frame {i} has non-positive ground truth")));
        }
    }
    let scales = match mode {
        DepthAlignment::MetricNone => vec![1.0; pred.len()],
        DepthAlignment::PerFrameMedian => pred
            .iter()
            .zip(gt)
            .zip(masks)
            .map(|((p, g), m)| {
                let (mut ps, mut gs): (Vec<f64>, Vec<f64>) = valid_pairs(p, g, m).unzip();
                let mp = median(&mut ps);
                if !(mp.abs() > 0.0) || !mp.is_finite() {
                    return Err(Error::Degenerate(format!("predicted median depth {mp}")));
                }
                Ok(median(&mut gs) / mp)
            })
            .collect::<Result<_>>()?,
        DepthAlignment::PerSequenceScale => {
            let mut ratios: Vec<f64> = pred
                .iter()
                .zip(gt)
                .zip(masks)
                .flat_map(|((p, g), m)| valid_pairs(p, g, m).map(|(p, g)| g / p))
                .collect();
            let s = median(&mut ratios);
            if !(s.abs() > 0.0) || !s.is_finite() {
                return Err(Error::Degenerate(format!("sequence scale {s}")));
            }
            vec![s; pred.len()]
        }
    };
    let (mut rel, mut inliers, mut n) = (0.0, 0usize, 0usize);
    for (((p, g), m), s) in pred.iter().zip(gt).zip(masks).zip(&scales) {
        for (p, d) in valid_pairs(p, g, m) {
            let p = s * p;
            rel += (p - d).abs() / d;
            if p > 0.0 && (p / d).max(d / p) < 1.25 {
                inliers += 1;
            }
            n += 1;
        }
    }
    Ok(DepthMetrics {
        abs_rel: rel / n as f64,
        delta_125: inliers as f64 / n as f64,
        alignment: mode,
        scales,
        pixels: n,
    })
}

/// ATE after aligning predicted camera centers onto the ground truth, and
/// RPE over consecutive frames.
pub fn pose_metrics(pred: &[CameraPose], gt: &[CameraPose]) -> Result<PoseMetrics> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("pose_metrics: {} vs {} poses", pred.len(), gt.len())));
    }
    if pred.len() < 3 {
        return Err(Error::Degenerate(format!("pose_metrics needs >= 3 poses, got {}", pred.len())));
    }
    let pc: Vec<V3> = pred.iter().map(|p| p.translation()).collect();
    let gc: Vec<V3> = gt.iter().map(|p| p.translation()).collect();
    let sim = umeyama_sim3(&pc, &gc)?;
    let ate = (pc.iter().zip(&gc).map(|(p, g)| (sim.apply(*p) - g).norm_squared()).sum::<f64>()
        / pc.len() as f64)
        .sqrt();
    let mut trans = Vec::with_capacity(pred.len() - 1);
    let mut rot = Vec::with_capacity(pred.len() - 1);
    for i in 0..pred.len() - 1 {
        let rp = pred[i + 1].relative_to(&pred[i]);
        let rg = gt[i + 1].relative_to(&gt[i]);
        trans.push((rp.translation() * sim.scale - rg.translation()).norm());
        rot.push(quat_geodesic_deg(rp.q, rg.q)?);
    }
    Ok(PoseMetrics {
        ate,
        rpe_trans: mean(&trans),
        rpe_rot: mean(&rot),
        rpe_trans_pairs: trans,
        rpe_rot_pairs: rot,
        alignment: Sim3Record::from(&sim),
    })
}

/// Points with unit normals.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Cloud {
    pub points: Vec<V3>,
    pub normals: Vec<V3>,
}

impl Cloud {
    pub fn new(points: Vec<V3>, normals: Vec<V3>) -> Result<Self> {
        if points.len() != normals.len() {
            return Err(Error::Shape(format!("{} points, {} normals", points.len(), normals.len())));
        }
        Ok(Cloud { points, normals })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Valid pixels whose normal can be estimated from grid neighbors.
    pub fn from_pointmap(pm: &Pointmap, mask: &[bool]) -> Self {
        let normals = grid_normals(pm, mask);
        let (points, normals) = normals
            .into_iter()
            .enumerate()
            .filter_map(|(i, n)| n.map(|n| (pm.point(i), n)))
            .unzip();
        Cloud { points, normals }
    }

    pub fn transformed(&self, sim: &Sim3) -> Self {
        Cloud {
            points: self.points.iter().map(|p| sim.apply(*p)).collect(),
            normals: self.normals.iter().map(|n| sim.rotation * n).collect(),
        }
    }
}

/// Normals from the cross product of horizontal and vertical finite
/// differences; one-sided at the border. `None` where a neighbor is invalid
/// or the differences are parallel.
pub fn grid_normals(pm: &Pointmap, mask: &[bool]) -> Vec<Option<V3>> {
    let (h, w) = (pm.height, pm.width);
    let ok = |r: usize, c: usize| mask[r * w + c] && pm.point(r * w + c).iter().all(|v| v.is_finite());
    let diff = |a: (usize, usize), b: (usize, usize)| -> Option<V3> {
        (ok(a.0, a.1) && ok(b.0, b.1)).then(|| pm.point(b.0 * w + b.1) - pm.point(a.0 * w + a.1))
    };
    let mut out = vec![None; h * w];
    if h < 2 || w < 2 {
        return out;
    }
    for r in 0..h {
        for c in 0..w {
            if !ok(r, c) {
                continue;
            }
            let dx = if c + 1 < w { diff((r, c), (r, c + 1)) } else { diff((r, c - 1), (r, c)) };
            let dy = if r + 1 < h { diff((r, c), (r + 1, c)) } else { diff((r - 1, c), (r, c)) };
            if let (Some(dx), Some(dy)) = (dx, dy) {
                let n = dx.cross(&dy);
                let len = n.norm();
                if len > 1e-12 * dx.norm() * dy.norm() && len > 0.0 {
                    out[r * w + c] = Some(n / len);
                }
            }
        }
    }
    out
}

/// `|a · b|` for unit vectors, written so identical normals give exactly 1.
fn normal_agreement(a: &V3, b: &V3) -> f64 {
    let d = (a - b).norm_squared().min((a + b).norm_squared());
    (1.0 - 0.5 * d).clamp(0.0, 1.0)
}

/// Directed nearest-neighbor accuracy (pred to gt), completion (gt to pred)
/// and normal consistency `|n · n_nn|` pooled over both directions.
pub fn recon_metrics(pred: &Cloud, gt: &Cloud) -> Result<ReconMetrics> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::Contract(format!(
            "recon_metrics: empty cloud ({} predicted, {} ground-truth points)",
            pred.len(),
            gt.len()
        )));
    }
    let gt_index = NearestIndex::new(&gt.points);
    let pred_index = NearestIndex::new(&pred.points);
    let mut nc = Vec::with_capacity(pred.len() + gt.len());
    let mut acc = Vec::with_capacity(pred.len());
    for (p, n) in pred.points.iter().zip(&pred.normals) {
        let (j, d) = gt_index.nearest(p);
        acc.push(d);
        nc.push(normal_agreement(n, &gt.normals[j]));
    }
    let mut comp = Vec::with_capacity(gt.len());
    for (p, n) in gt.points.iter().zip(&gt.normals) {
        let (j, d) = pred_index.nearest(p);
        comp.push(d);
        nc.push(normal_agreement(n, &pred.normals[j]));
    }
    Ok(ReconMetrics {
        acc_mean: mean(&acc),
        acc_median: median(&mut acc),
        comp_mean: mean(&comp),
        comp_median: median(&mut comp),
        nc_mean: mean(&nc),
        nc_median: median(&mut nc),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub depth_alignment: DepthAlignment,
    /// Align the predicted global cloud to the ground truth with a Sim(3)
    /// fitted on pixel correspondences before measuring Acc/Comp/NC.
    pub align_cloud: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            depth_alignment: DepthAlignment::PerFrameMedian,
            align_cloud: true,
        }
    }
}

/// How each metric bundle was aligned, or why it was skipped.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub frames: usize,
    pub depth_alignment: Option<DepthAlignment>,
    pub pose_alignment: Option<Sim3Record>,
    pub cloud_alignment: Option<Sim3Record>,
    pub skipped: Vec<String>,
}

/// Contents of `metrics.json`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub depth: Option<DepthMetrics>,
    pub pose: Option<PoseMetrics>,
    pub recon: Option<ReconMetrics>,
    pub provenance: Provenance,
}

impl MetricsReport {
    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

/// Metrics of one sequence's predictions against its ground truth.
/// Degenerate trajectories or clouds skip that bundle with a note.
pub fn evaluate_sequence(
    seq: &SceneSequence,
    preds: &[PointmapPrediction],
    config: &EvalConfig,
) -> Result<MetricsReport> {
    if preds.len() != seq.frames.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} frames",
            preds.len(),
            seq.frames.len()
        )));
    }
    let (h, w) = seq.resolution();
    if let Some(p) = preds.iter().find(|p| (p.x_local.height, p.x_local.width) != (h, w)) {
        return Err(Error::Shape(format!(
            "prediction for frame {} is {}x{}, scene is {h}x{w}",
            p.frame, p.x_local.height, p.x_local.width
        )));
    }
    let mut report = MetricsReport {
        provenance: Provenance {
            frames: preds.len(),
            ..Default::default()
        },
        ..Default::default()
    };

    let depths: Vec<Vec<f32>> = preds
        .iter()
        .map(|p| p.x_local.data.chunks_exact(3).map(|c| c[2]).collect())
        .collect();
    let pd: Vec<&[f32]> = depths.iter().map(|d| d.as_slice()).collect();
    let gd: Vec<&[f32]> = seq.frames.iter().map(|f| f.depth.as_slice()).collect();
    let masks: Vec<&[bool]> = seq.frames.iter().map(|f| f.valid.as_slice()).collect();
    match depth_metrics(&pd, &gd, &masks, config.depth_alignment) {
        Ok(d) => {
            report.provenance.depth_alignment = Some(d.alignment);
            report.depth = Some(d);
        }
        Err(e @ (Error::Degenerate(_) | Error::Contract(_))) => report.provenance.skipped.push(format!("depth: {e}")),
        Err(e) => return Err(e),
    }

    let pp: Vec<CameraPose> = preds.iter().map(|p| p.pose).collect();
    let gp: Vec<CameraPose> = seq.frames.iter().map(|f| f.pose).collect();
    match pose_metrics(&pp, &gp) {
        Ok(p) => {
            report.provenance.pose_alignment = Some(p.alignment.clone());
            report.pose = Some(p);
        }
        Err(e @ Error::Degenerate(_)) => report.provenance.skipped.push(format!("pose: {e}")),
        Err(e) => return Err(e),
    }

    let mut pred_cloud = Cloud::default();
    let mut gt_cloud = Cloud::default();
    let (mut src, mut dst) = (Vec::new(), Vec::new());
    for (p, f) in preds.iter().zip(&seq.frames) {
        let pc = Cloud::from_pointmap(&p.x_global, &f.valid);
        let gc = Cloud::from_pointmap(&f.ptmap_global, &f.valid);
        pred_cloud.points.extend(pc.points);
        pred_cloud.normals.extend(pc.normals);
        gt_cloud.points.extend(gc.points);
        gt_cloud.normals.extend(gc.normals);
        for (i, &v) in f.valid.iter().enumerate() {
            let a = p.x_global.point(i);
            if v && a.iter().all(|x| x.is_finite()) {
                src.push(a);
                dst.push(f.ptmap_global.point(i));
            }
        }
    }
    let aligned = if config.align_cloud {
        match umeyama_sim3(&src, &dst) {
            Ok(sim) => {
                report.provenance.cloud_alignment = Some(Sim3Record::from(&sim));
                Some(pred_cloud.transformed(&sim))
            }
            Err(e @ Error::Degenerate(_)) => {
                report.provenance.skipped.push(format!("recon: {e}"));
                None
            }
            Err(e) => return Err(e),
        }
    } else {
        Some(pred_cloud)
    };
    if let Some(pc) = aligned {
        match recon_metrics(&pc, &gt_cloud) {
            Ok(r) => report.recon = Some(r),
            Err(e @ Error::Contract(_)) => report.provenance.skipped.push(format!("recon: {e}")),
            Err(e) => return Err(e),
        }
    }
    Ok(report)
}

/// Reads a dataset directory and matching prediction dumps.
pub fn evaluate_dirs(dataset: &Path, predictions: &Path, config: &EvalConfig) -> Result<MetricsReport> {
    let seq = read_dataset(dataset)?;
    let (h, w) = seq.resolution();
    let preds = seq
        .frames
        .iter()
        .map(|f| read_prediction(predictions, f.index, h, w))
        .collect::<Result<Vec<_>>>()?;
    evaluate_sequence(&seq, &preds, config)
}

/// Predictions that reproduce the ground truth exactly.
pub fn oracle_predictions(seq: &SceneSequence) -> Vec<PointmapPrediction> {
    seq.frames
        .iter()
        .map(|f| PointmapPrediction {
            frame: f.index,
            x_local: f.ptmap_local.clone(),
            c_local: vec![1.0; f.valid.len()],
            x_global: f.ptmap_global.clone(),
            c_global: vec![1.0; f.valid.len()],
            pose: f.pose,
        })
        .collect()
}

/// Rotation by `deg` degrees about `axis`, composed onto `pose`.
pub fn perturb_rotation(pose: &CameraPose, axis: V3, deg: f64) -> Result<CameraPose> {
    let dq = Quat::from_axis_angle(axis, deg.to_radians())?;
    CameraPose::new(pose.q.mul(dq), pose.tau, pose.f)
}

#[cfg(test)]
mod tests;
