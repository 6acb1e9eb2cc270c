use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

type V3 = Vector3<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    Sphere { radius: f64 },
    /// Oriented box with half extents along its local axes.
    Cuboid { half: [f64; 3] },
    /// Infinite plane through the origin of the local frame with normal +z.
    Plane,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Texture {
    Checker { period: f64, a: [f64; 3], b: [f64; 3] },
    Gradient { axis: usize, period: f64, a: [f64; 3], b: [f64; 3] },
    Noise { seed: u32, period: f64, base: [f64; 3] },
}

/// Rigid motion applied per frame to dynamic primitives.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Motion {
    pub velocity: [f64; 3],
    /// Radians per frame about the local y axis.
    pub spin: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub center: [f64; 3],
    /// Local-to-world rotation as a row-major 3x3 matrix.
    pub rotation: [f64; 9],
    pub texture: Texture,
    pub motion: Option<Motion>,
}

pub struct Hit {
    pub t: f64,
    pub normal: V3,
    pub color: [f64; 3],
}

fn mat(r: &[f64; 9]) -> Matrix3<f64> {
    Matrix3::from_row_slice(r)
}

fn hash3(seed: u32, x: i64, y: i64, z: i64) -> f64 {
    let mut h = seed as u64 ^ 0x9E37_79B9_7F4A_7C15;
    for v in [x, y, z] {
        h ^= v as u64;
        h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h ^= h >> 31;
    }
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn value_noise(seed: u32, p: V3) -> f64 {
    let f = p.map(f64::floor);
    let fr = p - f;
    let s = fr.map(|t| t * t * (3.0 - 2.0 * t));
    let (x0, y0, z0) = (f.x as i64, f.y as i64, f.z as i64);
    let mut acc = 0.0;
    for dz in 0..2 {
        for dy in 0..2 {
            for dx in 0..2 {
                let w = (if dx == 1 { s.x } else { 1.0 - s.x })
                    * (if dy == 1 { s.y } else { 1.0 - s.y })
                    * (if dz == 1 { s.z } else { 1.0 - s.z });
                acc += w * hash3(seed, x0 + dx, y0 + dy, z0 + dz);
            }
        }
    }
    acc
}

impl Texture {
    fn color(&self, p: V3) -> [f64; 3] {
        match *self {
            Texture::Checker { period, a, b } => {
                let k = (p / period).map(f64::floor);
                if (k.x + k.y + k.z).rem_euclid(2.0) < 1.0 {
                    a
                } else {
                    b
                }
            }
            Texture::Gradient { axis, period, a, b } => {
                let t = (p[axis] / period).rem_euclid(1.0);
                let t = 1.0 - (2.0 * t - 1.0).abs();
                [0, 1, 2].map(|i| a[i] + (b[i] - a[i]) * t)
            }
            Texture::Noise { seed, period, base } => {
                let n = value_noise(seed, p / period);
                base.map(|c| (c * (0.4 + 0.9 * n)).min(1.0))
            }
        }
    }
}

impl Primitive {
    /// World-space center and rotation at frame `t` (0-based).
    pub fn placement(&self, t: usize) -> (V3, Matrix3<f64>) {
        let c = V3::from(self.center);
        let r = mat(&self.rotation);
        match self.motion {
            None => (c, r),
            Some(m) => {
                let tf = t as f64;
                let spin = nalgebra::Rotation3::from_axis_angle(&V3::y_axis(), m.spin * tf);
                (c + V3::from(m.velocity) * tf, r * spin.matrix())
            }
        }
    }

    /// Nearest intersection with `t > t_min` along `origin + t * dir`.
    pub fn intersect(&self, frame: usize, origin: V3, dir: V3, t_min: f64) -> Option<Hit> {
        let (c, r) = self.placement(frame);
        let rt = r.transpose();
        let o = rt * (origin - c);
        let d = rt * dir;
        let (t, n_local) = match self.shape {
            Shape::Sphere { radius } => {
                let a = d.dot(&d);
                let b = o.dot(&d);
                let cc = o.dot(&o) - radius * radius;
                let disc = b * b - a * cc;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t = [(-b - sq) / a, (-b + sq) / a]
                    .into_iter()
                    .find(|&t| t > t_min)?;
                (t, (o + d * t).normalize())
            }
            Shape::Plane => {
                if d.z.abs() < 1e-12 {
                    return None;
                }
                let t = -o.z / d.z;
                if t <= t_min {
                    return None;
                }
                (t, V3::z())
            }
            Shape::Cuboid { half } => {
                let mut t_near = f64::NEG_INFINITY;
                let mut t_far = f64::INFINITY;
                let mut axis_near = 0;
                let mut axis_far = 0;
                for i in 0..3 {
                    if d[i].abs() < 1e-15 {
                        if o[i].abs() > half[i] {
                            return None;
                        }
                        continue;
                    }
                    let t1 = (-half[i] - o[i]) / d[i];
                    let t2 = (half[i] - o[i]) / d[i];
                    let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
                    if lo > t_near {
                        t_near = lo;
                        axis_near = i;
                    }
                    if hi < t_far {
                        t_far = hi;
                        axis_far = i;
                    }
                }
                if t_near > t_far {
                    return None;
                }
                let (t, axis) = if t_near > t_min {
                    (t_near, axis_near)
                } else if t_far > t_min {
                    (t_far, axis_far)
                } else {
                    return None;
                };
                let mut n = V3::zeros();
                n[axis] = (o[axis] + d[axis] * t).signum();
                (t, n)
            }
        };
        let local = o + d * t;
        Some(Hit {
            t,
            normal: r * n_local,
            color: self.texture.color(local),
        })
    }
}
