//! Procedural ray-cast scenes with exact depth, pointmaps and poses.

pub(crate) mod io;
mod primitives;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use io::{read_dataset, write_dataset, RgbReader, DATASET_VERSION};
pub use primitives::{Hit, Motion, Primitive, Shape, Texture};

use crate::error::{Error, Result};
use crate::geometry::{local_to_global, principal_point, unproject, CameraPose, Pointmap, Quat};

type V3 = Vector3<f64>;

const NEAR: f64 = 1e-3;
const FAR: f64 = 100.0;
const MAX_STEP_ROTATION_DEG: f64 = 15.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trajectory {
    Orbit,
    Dolly,
    RandomWalk,
}

impl std::str::FromStr for Trajectory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "orbit" => Ok(Trajectory::Orbit),
            "dolly" => Ok(Trajectory::Dolly),
            "random_walk" | "random-walk" => Ok(Trajectory::RandomWalk),
            _ => Err(Error::Config(format!("unknown trajectory {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub n_frames: usize,
    pub height: usize,
    pub width: usize,
    /// Resolutions must be multiples of this.
    pub patch_size: usize,
    pub n_primitives: usize,
    pub trajectory: Trajectory,
    pub dynamic: bool,
    pub metric_scale: bool,
    /// Focal length in units of image width.
    pub focal_scale: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            n_frames: 6,
            height: 32,
            width: 32,
            patch_size: 8,
            n_primitives: 6,
            trajectory: Trajectory::Orbit,
            dynamic: false,
            metric_scale: false,
            focal_scale: 1.0,
        }
    }
}

/// Everything needed to re-render a sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneDescriptor {
    pub primitives: Vec<Primitive>,
    pub trajectory: Trajectory,
    /// Absolute camera-to-scene poses, before re-anchoring on frame 1.
    pub camera_poses: Vec<CameraPose>,
}

impl SceneDescriptor {
    /// Nearest surface along a world ray at frame `t` (0-based).
    pub fn cast(&self, t: usize, origin: V3, dir: V3) -> Option<Hit> {
        self.primitives
            .iter()
            .filter_map(|p| p.intersect(t, origin, dir, NEAR))
            .min_by(|a, b| a.t.total_cmp(&b.t))
    }

    /// Depth seen by camera `t` through sub-pixel location `(u, v)`.
    pub fn depth_at(&self, t: usize, u: f64, v: f64, height: usize, width: usize) -> Option<f64> {
        let cam = &self.camera_poses[t];
        let c = principal_point(height, width);
        let d_cam = V3::new((u - c[0]) / cam.f[0], (v - c[1]) / cam.f[1], 1.0);
        let hit = self.cast(t, cam.translation(), cam.rotation() * d_cam)?;
        (hit.t < FAR).then_some(hit.t)
    }
}

/// One RGB frame with its ground truth. `pose` and `ptmap_global` are
/// expressed in the camera frame of the sequence's first frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    /// 1-based position in the stream.
    pub index: usize,
    pub height: usize,
    pub width: usize,
    /// `H x W x 3`, values in `[0, 1]`, quantized to multiples of 1/255.
    pub rgb: Vec<f32>,
    pub depth: Vec<f32>,
    pub valid: Vec<bool>,
    pub pose: CameraPose,
    pub ptmap_local: Pointmap,
    pub ptmap_global: Pointmap,
}

impl Frame {
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSequence {
    pub seed: u64,
    pub metric_scale: bool,
    pub frames: Vec<Frame>,
    pub scene: SceneDescriptor,
}

impl SceneSequence {
    pub fn resolution(&self) -> (usize, usize) {
        self.frames
            .first()
            .map_or((0, 0), |f| (f.height, f.width))
    }

    /// Frames `indices` (0-based, increasing) re-anchored so the first
    /// selected frame defines the world.
    pub fn subsequence(&self, indices: &[usize]) -> Result<SceneSequence> {
        let first = *indices
            .first()
            .ok_or_else(|| Error::Contract("empty subsequence".into()))?;
        if indices.windows(2).any(|w| w[0] >= w[1]) || indices.iter().any(|&i| i >= self.frames.len()) {
            return Err(Error::Contract(format!("bad subsequence {indices:?}")));
        }
        let anchor = self.frames[first].pose;
        let frames = indices
            .iter()
            .enumerate()
            .map(|(k, &i)| {
                let src = &self.frames[i];
                let pose = src.pose.relative_to(&anchor);
                let ptmap_global = local_to_global(&src.ptmap_local, &pose, &CameraPose::identity(pose.f));
                Frame {
                    index: k + 1,
                    pose,
                    ptmap_global,
                    ..src.clone()
                }
            })
            .collect();
        Ok(SceneSequence {
            seed: self.seed,
            metric_scale: self.metric_scale,
            frames,
            scene: SceneDescriptor {
                camera_poses: indices.iter().map(|&i| self.scene.camera_poses[i]).collect(),
                ..self.scene.clone()
            },
        })
    }
}

fn look_at(position: V3, target: V3) -> Matrix3<f64> {
    let z = (target - position).normalize();
    let down = V3::y();
    let x = down.cross(&z).normalize();
    let y = z.cross(&x);
    Matrix3::from_columns(&[x, y, z])
}

fn random_color(rng: &mut impl Rng) -> [f64; 3] {
    [0, 1, 2].map(|_| rng.random_range(0.15..0.95))
}

fn random_texture(rng: &mut impl Rng) -> Texture {
    match rng.random_range(0..3) {
        0 => Texture::Checker {
            period: rng.random_range(0.15..0.5),
            a: random_color(rng),
            b: random_color(rng),
        },
        1 => Texture::Gradient {
            axis: rng.random_range(0..3),
            period: rng.random_range(0.3..1.2),
            a: random_color(rng),
            b: random_color(rng),
        },
        _ => Texture::Noise {
            seed: rng.random(),
            period: rng.random_range(0.1..0.4),
            base: random_color(rng),
        },
    }
}

fn rotation_rows(m: &Matrix3<f64>) -> [f64; 9] {
    let mut out = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            out[i * 3 + j] = m[(i, j)];
        }
    }
    out
}

const ROOM: [f64; 3] = [4.0, 2.5, 5.0];
const TARGET: [f64; 3] = [0.0, 0.3, 2.5];

fn room(rng: &mut impl Rng) -> Vec<Primitive> {
    // Six inward-facing planes; local +z is the plane normal.
    let faces: [(V3, V3); 6] = [
        (V3::new(0.0, 0.0, ROOM[2] + 1.0), -V3::z()),
        (V3::new(0.0, 0.0, -ROOM[2]), V3::z()),
        (V3::new(ROOM[0], 0.0, 0.0), -V3::x()),
        (V3::new(-ROOM[0], 0.0, 0.0), V3::x()),
        (V3::new(0.0, ROOM[1], 0.0), -V3::y()),
        (V3::new(0.0, -ROOM[1], 0.0), V3::y()),
    ];
    faces
        .iter()
        .map(|(c, n)| {
            let helper = if n.x.abs() < 0.9 { V3::x() } else { V3::y() };
            let u = helper.cross(n).normalize();
            let v = n.cross(&u);
            Primitive {
                shape: Shape::Plane,
                center: [c.x, c.y, c.z],
                rotation: rotation_rows(&Matrix3::from_columns(&[u, v, *n])),
                texture: random_texture(rng),
                motion: None,
            }
        })
        .collect()
}

fn objects(rng: &mut impl Rng, n: usize, dynamic: bool) -> Vec<Primitive> {
    (0..n)
        .map(|i| {
            let center = [
                TARGET[0] + rng.random_range(-1.4..1.4),
                TARGET[1] + rng.random_range(-1.0..1.2),
                TARGET[2] + rng.random_range(-1.0..1.4),
            ];
            let shape = if rng.random_bool(0.5) {
                Shape::Sphere {
                    radius: rng.random_range(0.25..0.6),
                }
            } else {
                Shape::Cuboid {
                    half: [0, 1, 2].map(|_| rng.random_range(0.2..0.5)),
                }
            };
            let axis = V3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ) + V3::new(0.0, 1e-3, 0.0);
            let rot = nalgebra::Rotation3::from_axis_angle(
                &nalgebra::Unit::new_normalize(axis),
                rng.random_range(0.0..std::f64::consts::PI),
            );
            // Every other object moves in dynamic scenes.
            let motion = (dynamic && i % 2 == 0).then(|| Motion {
                velocity: [0, 1, 2].map(|_| rng.random_range(-0.06..0.06)),
                spin: rng.random_range(-0.1..0.1),
            });
            Primitive {
                shape,
                center,
                rotation: rotation_rows(rot.matrix()),
                texture: random_texture(rng),
                motion,
            }
        })
        .collect()
}

fn trajectory(rng: &mut impl Rng, kind: Trajectory, n: usize, focal: f64) -> Vec<CameraPose> {
    let target = V3::from(TARGET);
    let mut poses = Vec::with_capacity(n);
    let pose = |pos: V3, rot: Matrix3<f64>| CameraPose {
        q: Quat::from_matrix(&rot),
        tau: [pos.x, pos.y, pos.z],
        f: [focal, focal],
    };
    match kind {
        Trajectory::Orbit => {
            let radius = rng.random_range(2.2..2.8);
            let step = rng.random_range(4.0..9.0f64).to_radians();
            let start = -step * (n as f64 - 1.0) / 2.0;
            let height = rng.random_range(-0.4..0.1);
            for k in 0..n {
                let a = start + step * k as f64;
                let pos = target + V3::new(radius * a.sin(), height, -radius * a.cos());
                poses.push(pose(pos, look_at(pos, target)));
            }
        }
        Trajectory::Dolly => {
            let step = rng.random_range(0.08..0.2);
            let sway = rng.random_range(0.1..0.3);
            for k in 0..n {
                let s = k as f64 / (n.max(2) - 1) as f64;
                let pos = V3::new(sway * (s * std::f64::consts::PI).sin(), 0.0, -0.5 + step * k as f64);
                let aim = V3::new(0.3 * sway * s, 0.2, pos.z + 3.0);
                poses.push(pose(pos, look_at(pos, aim)));
            }
        }
        Trajectory::RandomWalk => {
            let mut pos = V3::new(0.0, 0.0, -0.5);
            let mut rot = look_at(pos, target);
            for _ in 0..n {
                poses.push(pose(pos, rot));
                let axis = V3::new(
                    rng.random_range(-0.3..0.3),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-0.1..0.1),
                ) + V3::new(0.0, 1e-3, 0.0);
                let angle = rng.random_range(1.0..MAX_STEP_ROTATION_DEG * 0.6).to_radians();
                let delta = nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
                // Pull the gaze back toward the scene so frames keep overlapping.
                let toward = look_at(pos, target);
                let candidate = rot * delta.matrix();
                rot = if (candidate.column(2).dot(&toward.column(2))) > 0.85 {
                    candidate
                } else {
                    let rel = nalgebra::Rotation3::from_matrix_unchecked(rot.transpose() * toward);
                    let axis_angle = rel.scaled_axis();
                    let limit = (MAX_STEP_ROTATION_DEG * 0.6).to_radians();
                    let n = axis_angle.norm();
                    let clamped = if n > limit { axis_angle * (limit / n) } else { axis_angle };
                    rot * nalgebra::Rotation3::new(clamped).matrix()
                };
                let stepv = V3::new(
                    rng.random_range(-0.15..0.15),
                    rng.random_range(-0.05..0.05),
                    rng.random_range(-0.05..0.15),
                );
                pos += stepv;
            }
        }
    }
    poses
}

/// Renders a sequence of `config.n_frames` frames from `seed`.
pub fn generate_scene(seed: u64, config: &SceneConfig) -> Result<SceneSequence> {
    if config.n_frames < 2 {
        return Err(Error::Config(format!(
            "need at least 2 frames, got {}",
            config.n_frames
        )));
    }
    let p = config.patch_size;
    if p == 0 || config.height == 0 || config.width == 0 || !config.height.is_multiple_of(p) || !config.width.is_multiple_of(p) {
        return Err(Error::Config(format!(
            "resolution {}x{} is not a multiple of patch size {p}",
            config.height, config.width
        )));
    }
    if config.n_primitives == 0 {
        return Err(Error::Generation("scene has no primitives".into()));
    }
    if !(config.focal_scale > 0.0) {
        return Err(Error::Config("focal scale must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let focal = config.focal_scale * config.width as f64;
    let mut primitives = room(&mut rng);
    primitives.extend(objects(&mut rng, config.n_primitives, config.dynamic));
    let camera_poses = trajectory(&mut rng, config.trajectory, config.n_frames, focal);
    let scene = SceneDescriptor {
        primitives,
        trajectory: config.trajectory,
        camera_poses,
    };
    let frames = (0..config.n_frames)
        .map(|t| render_frame(&scene, t, config.height, config.width))
        .collect::<Result<Vec<_>>>()?;
    Ok(SceneSequence {
        seed,
        metric_scale: config.metric_scale,
        frames,
        scene,
    })
}

fn render_frame(scene: &SceneDescriptor, t: usize, height: usize, width: usize) -> Result<Frame> {
    let cam = &scene.camera_poses[t];
    let (r, origin) = (cam.rotation(), cam.translation());
    let c = principal_point(height, width);
    let light = V3::new(0.4, -1.0, -0.3).normalize();
    let mut rgb = vec![0.0f32; height * width * 3];
    let mut depth = vec![0.0f32; height * width];
    for v in 0..height {
        for u in 0..width {
            let i = v * width + u;
            let d_cam = V3::new((u as f64 - c[0]) / cam.f[0], (v as f64 - c[1]) / cam.f[1], 1.0);
            let Some(hit) = scene.cast(t, origin, r * d_cam) else {
                continue;
            };
            if hit.t >= FAR {
                continue;
            }
            depth[i] = hit.t as f32;
            let shade = 0.55 + 0.45 * hit.normal.dot(&-light).abs();
            for k in 0..3 {
                let value = (hit.color[k] * shade).clamp(0.0, 1.0);
                rgb[i * 3 + k] = (value * 255.0).round() as f32 / 255.0;
            }
        }
    }
    let anchor = &scene.camera_poses[0];
    let pose = cam.relative_to(anchor);
    let (ptmap_local, valid) = unproject(&depth, height, width, pose.f, c)?;
    let ptmap_global = local_to_global(&ptmap_local, &pose, &CameraPose::identity(pose.f));
    Ok(Frame {
        index: t + 1,
        height,
        width,
        rgb,
        depth,
        valid,
        pose,
        ptmap_local,
        ptmap_global,
    })
}
