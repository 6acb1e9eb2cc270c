//! Dense pointmap heads, pose head and the prediction dump format.

use std::path::Path;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::geometry::{CameraPose, FrameOfReference, Pointmap, Quat};
use crate::model::{Graph, ModelConfig};
use crate::numerics::{Real, Tensor, Var, GATHER_ZERO};
use crate::scenegen::io::{bytes_f32, f32_bytes, read_file, write_file, PoseFile};

/// Quaternion outputs with a smaller norm fall back to the identity.
pub const QUAT_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    Local,
    Global,
}

impl HeadKind {
    fn prefix(self) -> &'static str {
        match self {
            HeadKind::Local => "head_local",
            HeadKind::Global => "head_global",
        }
    }
}

/// Head outputs for `n_frames` frames stacked along rows.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutputs {
    /// `[n * H * W, 3]`.
    pub x_local: Var,
    /// `[n * H * W]`, all `> 1`.
    pub c_local: Var,
    pub x_global: Var,
    pub c_global: Var,
    /// `[n, 4]` unit, `w >= 0`.
    pub q: Var,
    /// `[n, 3]`.
    pub tau: Var,
    /// `[n, 2]` in pixels.
    pub f: Var,
    pub n_frames: usize,
}

/// Per-frame model output.
#[derive(Clone, Debug, PartialEq)]
pub struct PointmapPrediction {
    /// 1-based.
    pub frame: usize,
    pub x_local: Pointmap,
    pub c_local: Vec<f32>,
    pub x_global: Pointmap,
    pub c_global: Vec<f32>,
    pub pose: CameraPose,
}

fn check_pyramid<T: Real>(g: &Graph<'_, T>, levels: &[Var], n: usize) -> Result<()> {
    let cfg = g.params().config();
    if levels.len() != cfg.decoder_depth + 1 {
        return Err(Error::Shape(format!(
            "pyramid has {} levels, expected {}",
            levels.len(),
            cfg.decoder_depth + 1
        )));
    }
    let rows = n * cfg.tokens_per_frame();
    if levels.iter().any(|&l| g.shape(l) != [rows, cfg.dim]) {
        return Err(Error::Shape(format!("pyramid levels must be [{rows}, {}]", cfg.dim)));
    }
    Ok(())
}

/// Index that rearranges per-token `p*p*ch` rows into per-pixel `ch` rows.
fn unshuffle_index(cfg: &ModelConfig, n: usize, ch: usize) -> Rc<[usize]> {
    let (p, h, w) = (cfg.patch_size, cfg.height, cfg.width);
    let (_, gw) = cfg.grid();
    let k = cfg.tokens_per_frame();
    let row = p * p * ch;
    let mut idx = Vec::with_capacity(n * h * w * ch);
    for fi in 0..n {
        for r in 0..h {
            for c in 0..w {
                let tok = fi * k + (r / p) * gw + c / p;
                let base = tok * row + ((r % p) * p + c % p) * ch;
                idx.extend(base..base + ch);
            }
        }
    }
    idx.into()
}

/// 3x3 zero-padded neighbourhoods of an `[n * H * W, ch]` image stack.
fn im2col_index(n: usize, h: usize, w: usize, ch: usize) -> Rc<[usize]> {
    let mut idx = Vec::with_capacity(n * h * w * 9 * ch);
    for fi in 0..n {
        for r in 0..h as isize {
            for c in 0..w as isize {
                for dy in -1..=1isize {
                    for dx in -1..=1isize {
                        let (rr, cc) = (r + dy, c + dx);
                        if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                            idx.extend(std::iter::repeat_n(GATHER_ZERO, ch));
                        } else {
                            let pix = fi * h * w + rr as usize * w + cc as usize;
                            idx.extend(pix * ch..pix * ch + ch);
                        }
                    }
                }
            }
        }
    }
    idx.into()
}

fn conv3x3<T: Real>(g: &mut Graph<'_, T>, name: &str, x: Var, n: usize, ch: usize) -> Result<Var> {
    let cfg = g.params().config();
    let (h, w) = (cfg.height, cfg.width);
    let cols = g.gather(x, im2col_index(n, h, w, ch), &[n * h * w, 9 * ch])?;
    g.linear(name, cols)
}

/// Dense pointmap head: linear on levels `B/2` and `B`, pixel unshuffle,
/// then a residual two-layer 3x3 convolution. Returns points `[n*H*W, 3]`
/// and confidences `[n*H*W]` with `c = 1 + exp(raw)`.
pub fn head_pointmap<T: Real>(
    g: &mut Graph<'_, T>,
    kind: HeadKind,
    levels: &[Var],
    n: usize,
) -> Result<(Var, Var)> {
    check_pyramid(g, levels, n)?;
    let cfg = g.params().config();
    let pre = kind.prefix();
    let (mid, top) = cfg.head_levels();
    let hw = cfg.pixels();
    let y = g.linear(&format!("{pre}.mid"), levels[mid])?;
    let wt = g.p(&format!("{pre}.top.w"))?;
    let yt = g.matmul(levels[top], wt)?;
    let y = g.add(y, yt)?;
    let y = g.gather(y, unshuffle_index(cfg, n, 4), &[n * hw, 4])?;
    let z = conv3x3(g, &format!("{pre}.conv1"), y, n, 4)?;
    let z = g.gelu(z);
    let z = conv3x3(g, &format!("{pre}.conv2"), z, n, cfg.head_hidden)?;
    let y = g.add(y, z)?;
    let pts = g.slice_cols(y, 0, 3)?;
    let raw = g.slice_cols(y, 3, 4)?;
    let raw = g.reshape(raw, &[n * hw])?;
    let e = g.exp(raw);
    let conf = g.add_scalar(e, T::one());
    Ok((pts, conf))
}

/// Pose head: per-frame mean of the last level, two-layer MLP to 9 values,
/// then quaternion normalization, translation and `f = exp(raw) * width`.
pub fn head_pose<T: Real>(g: &mut Graph<'_, T>, levels: &[Var], n: usize) -> Result<(Var, Var, Var)> {
    check_pyramid(g, levels, n)?;
    let cfg = g.params().config();
    let k = cfg.tokens_per_frame();
    let inv = T::one() / T::of(k as f64);
    let pool = Tensor::from_fn(&[n, n * k], |i| if (i % (n * k)) / k == i / (n * k) { inv } else { T::zero() });
    let pool = g.constant(pool);
    let pooled = g.matmul(pool, levels[cfg.decoder_depth])?;
    let h = g.linear("head_pose.fc1", pooled)?;
    let h = g.gelu(h);
    let out = g.linear("head_pose.fc2", h)?;
    let q_raw = g.slice_cols(out, 0, 4)?;
    let q = normalize_quats(g, q_raw)?;
    let tau = g.slice_cols(out, 4, 7)?;
    let f_raw = g.slice_cols(out, 7, 9)?;
    let f = g.exp(f_raw);
    let f = g.scale(f, T::of(cfg.width as f64));
    Ok((q, tau, f))
}

/// Unit, sign-canonical quaternions; rows with norm below [`QUAT_EPS`]
/// become the identity.
fn normalize_quats<T: Real>(g: &mut Graph<'_, T>, q_raw: Var) -> Result<Var> {
    let v = g.value(q_raw).clone();
    let n = v.rows();
    let norms: Vec<f64> = v
        .data()
        .chunks(4)
        .map(|r| r.iter().map(|x| x.f64() * x.f64()).sum::<f64>().sqrt())
        .collect();
    let signs = Tensor::from_fn(&[n, 4], |i| {
        if v.data()[(i / 4) * 4] < T::zero() {
            -T::one()
        } else {
            T::one()
        }
    });
    let signs = g.constant(signs);
    if norms.iter().all(|&s| s >= QUAT_EPS) {
        let q = g.normalize_groups(q_raw, 4)?;
        return g.mul(q, signs);
    }
    let mut rows = Vec::with_capacity(n);
    for (i, &s) in norms.iter().enumerate() {
        if s >= QUAT_EPS {
            let r = g.slice_rows(q_raw, i, i + 1)?;
            let r = g.normalize_groups(r, 4)?;
            let sg = g.slice_rows(signs, i, i + 1)?;
            rows.push(g.mul(r, sg)?);
        } else {
            let id = Tensor::new(vec![1, 4], vec![T::one(), T::zero(), T::zero(), T::zero()])?;
            rows.push(g.constant(id));
        }
    }
    g.concat_rows(&rows)
}

pub fn run_heads<T: Real>(g: &mut Graph<'_, T>, levels: &[Var], n: usize) -> Result<HeadOutputs> {
    let (x_local, c_local) = head_pointmap(g, HeadKind::Local, levels, n)?;
    let (x_global, c_global) = head_pointmap(g, HeadKind::Global, levels, n)?;
    let (q, tau, f) = head_pose(g, levels, n)?;
    Ok(HeadOutputs {
        x_local,
        c_local,
        x_global,
        c_global,
        q,
        tau,
        f,
        n_frames: n,
    })
}

fn to_f32<T: Real>(s: &[T]) -> Vec<f32> {
    s.iter().map(|v| v.f64() as f32).collect()
}

impl HeadOutputs {
    /// Concrete predictions; frames are numbered from `first_frame`.
    pub fn predictions<T: Real>(&self, g: &Graph<'_, T>, first_frame: usize) -> Result<Vec<PointmapPrediction>> {
        let cfg = g.params().config();
        let (h, w) = (cfg.height, cfg.width);
        let hw = h * w;
        let mut out = Vec::with_capacity(self.n_frames);
        for i in 0..self.n_frames {
            let pm = |v: Var, frame| {
                Pointmap::new(h, w, frame, to_f32(&g.value(v).data()[i * hw * 3..(i + 1) * hw * 3]))
            };
            let conf = |v: Var| to_f32(&g.value(v).data()[i * hw..(i + 1) * hw]);
            let row = |v: Var, c: usize| -> Vec<f64> {
                g.value(v).data()[i * c..(i + 1) * c].iter().map(|x| x.f64()).collect()
            };
            let q = row(self.q, 4);
            let tau = row(self.tau, 3);
            let f = row(self.f, 2);
            let pose = CameraPose::new(
                Quat::new(q[0], q[1], q[2], q[3]),
                [tau[0], tau[1], tau[2]],
                [f[0], f[1]],
            )?;
            out.push(PointmapPrediction {
                frame: first_frame + i,
                x_local: pm(self.x_local, FrameOfReference::Local)?,
                c_local: conf(self.c_local),
                x_global: pm(self.x_global, FrameOfReference::Global)?,
                c_global: conf(self.c_global),
                pose,
            });
        }
        Ok(out)
    }
}

pub fn prediction_paths(dir: &Path, frame: usize) -> (std::path::PathBuf, std::path::PathBuf) {
    (
        dir.join(format!("pred_{frame:04}.f32")),
        dir.join(format!("pred_pose_{frame:04}.json")),
    )
}

/// Writes `pred_%04d.f32` (`[X_local | C_local | X_global | C_global]`,
/// little-endian f32) and `pred_pose_%04d.json`.
pub fn write_prediction(dir: &Path, pred: &PointmapPrediction) -> Result<()> {
    let (bin, pose) = prediction_paths(dir, pred.frame);
    let mut v = Vec::with_capacity(pred.x_local.data.len() * 2 + pred.c_local.len() * 2);
    v.extend_from_slice(&pred.x_local.data);
    v.extend_from_slice(&pred.c_local);
    v.extend_from_slice(&pred.x_global.data);
    v.extend_from_slice(&pred.c_global);
    write_file(&bin, &f32_bytes(&v))?;
    let json = serde_json::to_vec_pretty(&PoseFile::from(&pred.pose))?;
    write_file(&pose, &json)
}

pub fn read_prediction(dir: &Path, frame: usize, height: usize, width: usize) -> Result<PointmapPrediction> {
    let (bin, pose) = prediction_paths(dir, frame);
    let bytes = read_file(&bin)?;
    let hw = height * width;
    if bytes.len() != hw * 8 * 4 {
        return Err(Error::format(
            &bin,
            format!("expected {} bytes for {height}x{width}, found {}", hw * 32, bytes.len()),
        ));
    }
    let v = bytes_f32(&bytes);
    let pose: PoseFile = serde_json::from_slice(&read_file(&pose)?)?;
    let pose = CameraPose::from(pose);
    pose.validate()?;
    Ok(PointmapPrediction {
        frame,
        x_local: Pointmap::new(height, width, FrameOfReference::Local, v[..hw * 3].to_vec())?,
        c_local: v[hw * 3..hw * 4].to_vec(),
        x_global: Pointmap::new(height, width, FrameOfReference::Global, v[hw * 4..hw * 7].to_vec())?,
        c_global: v[hw * 7..].to_vec(),
        pose,
    })
}
