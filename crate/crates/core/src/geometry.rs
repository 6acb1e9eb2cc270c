//! Camera and pose math: quaternions, pinhole (un)projection, frame changes
//! of pointmaps and closed-form similarity alignment.
//!
//! Conventions: +z forward, +x right, +y down. Poses map camera coordinates
//! to world coordinates, `X_world = R(q) X_cam + tau`. The principal point
//! sits at the image center `(W / 2, H / 2)`.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rotation quaternion stored as `(w, x, y, z)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quat {
    pub const IDENTITY: Quat = Quat {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Quat { w, x, y, z }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Quat::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn norm(self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    /// Unit quaternion with `w >= 0`.
    pub fn normalized(self) -> Result<Self> {
        let n = self.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::Contract(format!("cannot normalize quaternion {self:?}")));
        }
        Ok(Quat::new(self.w / n, self.x / n, self.y / n, self.z / n).canonical())
    }

    /// Sign-canonical representative (`w >= 0`) of the double cover.
    pub fn canonical(self) -> Self {
        if self.w < 0.0 {
            Quat::new(-self.w, -self.x, -self.y, -self.z)
        } else {
            self
        }
    }

    pub fn conj(self) -> Self {
        Quat::new(self.w, -self.x, -self.y, -self.z)
    }

    /// Hamilton product `self * r`.
    pub fn mul(self, r: Quat) -> Quat {
        let (a, b) = (self, r);
        Quat::new(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }

    /// Rotation of `angle` radians about `axis`.
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64) -> Result<Self> {
        let n = axis.norm();
        if !(n > 0.0) {
            return Err(Error::Contract("zero rotation axis".into()));
        }
        let a = axis / n;
        let (s, c) = (angle / 2.0).sin_cos();
        Ok(Quat::new(c, a.x * s, a.y * s, a.z * s).canonical())
    }

    /// Quaternion of a proper rotation matrix (Shepperd's method).
    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        let tr = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
        let q = if tr > 0.0 {
            let s = (tr + 1.0).sqrt() * 2.0;
            Quat::new(
                0.25 * s,
                (m[(2, 1)] - m[(1, 2)]) / s,
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(1, 0)] - m[(0, 1)]) / s,
            )
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
            Quat::new(
                (m[(2, 1)] - m[(1, 2)]) / s,
                0.25 * s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
            )
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
            Quat::new(
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                0.25 * s,
                (m[(1, 2)] + m[(2, 1)]) / s,
            )
        } else {
            let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
            Quat::new(
                (m[(1, 0)] - m[(0, 1)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
                (m[(1, 2)] + m[(2, 1)]) / s,
                0.25 * s,
            )
        };
        let n = q.norm();
        Quat::new(q.w / n, q.x / n, q.y / n, q.z / n).canonical()
    }
}

/// Rotation matrix of a quaternion; the input is normalized first.
pub fn quat_to_matrix(q: Quat) -> Result<Matrix3<f64>> {
    let Quat { w, x, y, z } = q.normalized()?;
    Ok(Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    ))
}

/// Angle in degrees of the rotation taking `a` to `b`, in `[0, 180]`.
///
/// Uses `2 atan2(|v|, |w|)` of the relative quaternion, which is exactly zero
/// for identical inputs and insensitive to the sign of either input.
pub fn quat_geodesic_deg(a: Quat, b: Quat) -> Result<f64> {
    let (a, b) = (a.normalized()?, b.normalized()?);
    // conj(a) * b, grouped so that each vector component cancels exactly
    // when a == b.
    let w = a.w * b.w + (a.x * b.x + a.y * b.y + a.z * b.z);
    let vx = (a.w * b.x - b.w * a.x) - (a.y * b.z - a.z * b.y);
    let vy = (a.w * b.y - b.w * a.y) - (a.z * b.x - a.x * b.z);
    let vz = (a.w * b.z - b.w * a.z) - (a.x * b.y - a.y * b.x);
    let v = (vx * vx + vy * vy + vz * vz).sqrt();
    Ok(2.0 * v.atan2(w.abs()).to_degrees())
}

/// Camera-to-world pose with focal lengths in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub q: Quat,
    pub tau: [f64; 3],
    pub f: [f64; 2],
}

impl CameraPose {
    pub fn new(q: Quat, tau: [f64; 3], f: [f64; 2]) -> Result<Self> {
        let pose = CameraPose {
            q: q.normalized()?,
            tau,
            f,
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn identity(f: [f64; 2]) -> Self {
        CameraPose {
            q: Quat::IDENTITY,
            tau: [0.0; 3],
            f,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if (self.q.norm() - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(format!("non-unit quaternion {:?}", self.q)));
        }
        if self.q.w < 0.0 {
            return Err(Error::Contract("quaternion not sign-canonical".into()));
        }
        if !(self.f[0] > 0.0 && self.f[1] > 0.0) {
            return Err(Error::Contract(format!("non-positive focal {:?}", self.f)));
        }
        if self.tau.iter().any(|t| !t.is_finite()) {
            return Err(Error::Contract("non-finite translation".into()));
        }
        Ok(())
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        quat_to_matrix(self.q).unwrap_or_else(|_| Matrix3::identity())
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::from(self.tau)
    }

    pub fn transform_point(&self, x: Vector3<f64>) -> Vector3<f64> {
        self.rotation() * x + self.translation()
    }

    /// This pose expressed in the camera frame of `anchor`: `T_anchor^-1 T_self`.
    pub fn relative_to(&self, anchor: &CameraPose) -> CameraPose {
        if self.q == anchor.q && self.tau == anchor.tau {
            return CameraPose::identity(self.f);
        }
        let ra_t = anchor.rotation().transpose();
        let tau = ra_t * (self.translation() - anchor.translation());
        CameraPose {
            q: anchor.q.conj().mul(self.q).canonical(),
            tau: [tau.x, tau.y, tau.z],
            f: self.f,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FrameOfReference {
    Local,
    Global,
}

/// `H x W x 3` grid of points, row-major with channels last.
#[derive(Clone, Debug, PartialEq)]
pub struct Pointmap {
    pub height: usize,
    pub width: usize,
    pub frame: FrameOfReference,
    pub data: Vec<f32>,
}

impl Pointmap {
    pub fn new(height: usize, width: usize, frame: FrameOfReference, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "pointmap {height}x{width} needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Pointmap {
            height,
            width,
            frame,
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn point(&self, idx: usize) -> Vector3<f64> {
        let p = &self.data[idx * 3..idx * 3 + 3];
        Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64)
    }

    pub fn points(&self) -> impl Iterator<Item = Vector3<f64>> + '_ {
        (0..self.len()).map(|i| self.point(i))
    }

    fn map_points(&self, frame: FrameOfReference, f: impl Fn(Vector3<f64>) -> Vector3<f64>) -> Pointmap {
        let mut data = Vec::with_capacity(self.data.len());
        for p in self.points() {
            let q = f(p);
            data.extend_from_slice(&[q.x as f32, q.y as f32, q.z as f32]);
        }
        Pointmap {
            height: self.height,
            width: self.width,
            frame,
            data,
        }
    }
}

/// Principal point of a `height x width` image.
pub fn principal_point(height: usize, width: usize) -> [f64; 2] {
    [width as f64 / 2.0, height as f64 / 2.0]
}

/// Back-projects a depth map into the camera frame. Returns the local
/// pointmap and the validity mask (finite, strictly positive depth); invalid
/// pixels hold zeros.
pub fn unproject(
    depth: &[f32],
    height: usize,
    width: usize,
    focal: [f64; 2],
    principal: [f64; 2],
) -> Result<(Pointmap, Vec<bool>)> {
    if !(focal[0] > 0.0 && focal[1] > 0.0) {
        return Err(Error::Contract(format!("non-positive focal {focal:?}")));
    }
    if depth.len() != height * width {
        return Err(Error::Shape(format!(
            "depth of {} values for {height}x{width}",
            depth.len()
        )));
    }
    let mut data = vec![0.0f32; height * width * 3];
    let mut valid = vec![false; height * width];
    for v in 0..height {
        for u in 0..width {
            let i = v * width + u;
            let d = depth[i] as f64;
            if !(d > 0.0 && d.is_finite()) {
                continue;
            }
            valid[i] = true;
            data[i * 3] = (d * (u as f64 - principal[0]) / focal[0]) as f32;
            data[i * 3 + 1] = (d * (v as f64 - principal[1]) / focal[1]) as f32;
            data[i * 3 + 2] = d as f32;
        }
    }
    Ok((
        Pointmap::new(height, width, FrameOfReference::Local, data)?,
        valid,
    ))
}

/// Pixel coordinates and depth of a camera-frame point; `None` behind the camera.
pub fn project(x: Vector3<f64>, focal: [f64; 2], principal: [f64; 2]) -> Option<(f64, f64, f64)> {
    if x.z <= 0.0 {
        return None;
    }
    Some((
        focal[0] * x.x / x.z + principal[0],
        focal[1] * x.y / x.z + principal[1],
        x.z,
    ))
}

/// `X_global = T_1^-1 T_t X_local`.
pub fn local_to_global(pm: &Pointmap, pose_t: &CameraPose, pose_1: &CameraPose) -> Pointmap {
    let rel = pose_t.relative_to(pose_1);
    let (r, t) = (rel.rotation(), rel.translation());
    pm.map_points(FrameOfReference::Global, |p| r * p + t)
}

/// Inverse of [`local_to_global`].
pub fn global_to_local(pm: &Pointmap, pose_t: &CameraPose, pose_1: &CameraPose) -> Pointmap {
    let rel = pose_t.relative_to(pose_1);
    let (r_t, t) = (rel.rotation().transpose(), rel.translation());
    pm.map_points(FrameOfReference::Local, |p| r_t * (p - t))
}

/// Similarity transform `x -> s R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sim3 {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Sim3 {
    pub fn identity() -> Self {
        Sim3 {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, x: Vector3<f64>) -> Vector3<f64> {
        self.rotation * x * self.scale + self.translation
    }

    /// `self ∘ other`, applying `other` first.
    pub fn compose(&self, other: &Sim3) -> Sim3 {
        Sim3 {
            scale: self.scale * other.scale,
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation * self.scale + self.translation,
        }
    }

    pub fn inverse(&self) -> Sim3 {
        let r_t = self.rotation.transpose();
        Sim3 {
            scale: 1.0 / self.scale,
            rotation: r_t,
            translation: -(r_t * self.translation) / self.scale,
        }
    }

    pub fn is_valid(&self) -> bool {
        let r = &self.rotation;
        self.scale > 0.0
            && (r.transpose() * r - Matrix3::identity()).abs().max() < 1e-6
            && (r.determinant() - 1.0).abs() < 1e-6
    }
}

/// Least-squares similarity taking `src` onto `dst` (Umeyama's closed form).
///
/// Fails with [`Error::Degenerate`] when fewer than three correspondences are
/// given or the centered source points span less than a plane.
pub fn umeyama_sim3(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<Sim3> {
    if src.len() != dst.len() {
        return Err(Error::Shape(format!(
            "umeyama: {} source vs {} target points",
            src.len(),
            dst.len()
        )));
    }
    let n = src.len();
    if n < 3 {
        return Err(Error::Degenerate(format!("umeyama needs >= 3 points, got {n}")));
    }
    let inv_n = 1.0 / n as f64;
    let mu_s = src.iter().sum::<Vector3<f64>>() * inv_n;
    let mu_d = dst.iter().sum::<Vector3<f64>>() * inv_n;
    let mut cov = Matrix3::zeros();
    let mut src_cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let (cs, cd) = (s - mu_s, d - mu_d);
        cov += cd * cs.transpose();
        src_cov += cs * cs.transpose();
        var_s += cs.norm_squared();
    }
    cov *= inv_n;
    src_cov *= inv_n;
    var_s *= inv_n;

    let mut spread = src_cov.symmetric_eigenvalues().as_slice().to_vec();
    spread.sort_by(|a, b| b.total_cmp(a));
    if !(spread[0] > 0.0) || spread[1] <= 1e-12 * spread[0] {
        return Err(Error::Degenerate(
            "source points are coincident or collinear".into(),
        ));
    }
    if src == dst {
        return Ok(Sim3::identity());
    }

    let svd = cov.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::Degenerate("svd did not converge".into())),
    };
    let d = svd.singular_values;
    let mut sign = Matrix3::identity();
    if u.determinant() * v_t.determinant() < 0.0 {
        sign[(2, 2)] = -1.0;
    }
    let rotation = u * sign * v_t;
    let scale = (d[0] * sign[(0, 0)] + d[1] * sign[(1, 1)] + d[2] * sign[(2, 2)]) / var_s;
    if !(scale > 0.0) {
        return Err(Error::Degenerate(format!("non-positive scale {scale}")));
    }
    let translation = mu_d - rotation * mu_s * scale;
    Ok(Sim3 {
        scale,
        rotation,
        translation,
    })
}
