//! On-disk dataset layout.
//!
//! ```text
//! manifest.json                  version, resolution, n_frames, metric_scale,
//!                                seed, per-frame file names and CRC-32s
//! rgb_%04d.ppm                   binary P6, 8-bit
//! depth_%04d.f32                 H*W little-endian f32
//! ptmap_local_%04d.f32           H*W*3 little-endian f32, channels last
//! ptmap_global_%04d.f32          H*W*3 little-endian f32, channels last
//! pose_%04d.json                 {"q": [w,x,y,z], "tau": [x,y,z], "f": [fx,fy]}
//! mask_%04d.u8                   H*W bytes, 1 = valid
//! ```
//!
//! Frame numbers are 1-based.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Frame, SceneDescriptor, SceneSequence};
use crate::error::{Error, Result};
use crate::geometry::{CameraPose, FrameOfReference, Pointmap, Quat};

pub const DATASET_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";

#[derive(Serialize, Deserialize)]
struct FrameFiles {
    rgb: String,
    depth: String,
    ptmap_local: String,
    ptmap_global: String,
    pose: String,
    mask: String,
    crc32: [u32; 6],
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    resolution: [usize; 2],
    n_frames: usize,
    metric_scale: bool,
    seed: u64,
    frames: Vec<FrameFiles>,
    scene: SceneDescriptor,
}

/// JSON layout of a pose file; shared with prediction dumps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseFile {
    pub q: [f64; 4],
    pub tau: [f64; 3],
    pub f: [f64; 2],
}

impl From<&CameraPose> for PoseFile {
    fn from(p: &CameraPose) -> Self {
        PoseFile {
            q: p.q.to_array(),
            tau: p.tau,
            f: p.f,
        }
    }
}

impl From<PoseFile> for CameraPose {
    fn from(p: PoseFile) -> Self {
        CameraPose {
            q: Quat::from_array(p.q),
            tau: p.tau,
            f: p.f,
        }
    }
}

pub(crate) fn f32_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub(crate) fn bytes_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

fn ppm_bytes(rgb: &[f32], height: usize, width: usize) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend(rgb.iter().map(|&c| (c * 255.0).round().clamp(0.0, 255.0) as u8));
    out
}

fn parse_ppm(path: &Path, bytes: &[u8], height: usize, width: usize) -> Result<Vec<f32>> {
    let header = format!("P6\n{width} {height}\n255\n");
    if !bytes.starts_with(b"P6") {
        return Err(Error::format(path, "bad PPM magic"));
    }
    if !bytes.starts_with(header.as_bytes()) {
        return Err(Error::format(path, "PPM header does not match manifest resolution"));
    }
    let body = &bytes[header.len()..];
    if body.len() != height * width * 3 {
        return Err(Error::format(
            path,
            format!("truncated PPM: {} of {} bytes", body.len(), height * width * 3),
        ));
    }
    Ok(body.iter().map(|&b| b as f32 / 255.0).collect())
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => {
            Error::Consistency(format!("missing file {}", path.display()))
        }
        _ => Error::io(path, e),
    })
}

/// Writes `seq` into `dir`, creating it if needed.
pub fn write_dataset(seq: &SceneSequence, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (h, w) = seq.resolution();
    let mut frames = Vec::with_capacity(seq.frames.len());
    for (k, f) in seq.frames.iter().enumerate() {
        let n = k + 1;
        let names = [
            format!("rgb_{n:04}.ppm"),
            format!("depth_{n:04}.f32"),
            format!("ptmap_local_{n:04}.f32"),
            format!("ptmap_global_{n:04}.f32"),
            format!("pose_{n:04}.json"),
            format!("mask_{n:04}.u8"),
        ];
        let payloads = [
            ppm_bytes(&f.rgb, h, w),
            f32_bytes(&f.depth),
            f32_bytes(&f.ptmap_local.data),
            f32_bytes(&f.ptmap_global.data),
            serde_json::to_vec_pretty(&PoseFile::from(&f.pose))?,
            f.valid.iter().map(|&v| v as u8).collect(),
        ];
        let mut crc = [0u32; 6];
        for (i, (name, bytes)) in names.iter().zip(&payloads).enumerate() {
            write_file(&dir.join(name), bytes)?;
            crc[i] = crc32fast::hash(bytes);
        }
        let [rgb, depth, ptmap_local, ptmap_global, pose, mask] = names;
        frames.push(FrameFiles {
            rgb,
            depth,
            ptmap_local,
            ptmap_global,
            pose,
            mask,
            crc32: crc,
        });
    }
    let manifest = Manifest {
        version: DATASET_VERSION,
        resolution: [h, w],
        n_frames: seq.frames.len(),
        metric_scale: seq.metric_scale,
        seed: seq.seed,
        frames,
        scene: seq.scene.clone(),
    };
    write_file(&dir.join(MANIFEST), &serde_json::to_vec_pretty(&manifest)?)
}

fn checked(dir: &Path, name: &str, expected_len: Option<usize>, crc: u32) -> Result<Vec<u8>> {
    let path = dir.join(name);
    let bytes = read_file(&path)?;
    if let Some(len) = expected_len {
        if bytes.len() != len {
            return Err(Error::format(
                &path,
                format!("truncated or oversized: {} bytes, expected {len}", bytes.len()),
            ));
        }
    }
    if crc32fast::hash(&bytes) != crc {
        return Err(Error::format(&path, "checksum mismatch"));
    }
    Ok(bytes)
}

/// Reads a dataset written by [`write_dataset`], validating sizes and checksums.
pub fn read_dataset(dir: &Path) -> Result<SceneSequence> {
    let mpath = dir.join(MANIFEST);
    let manifest: Manifest = serde_json::from_slice(&read_file(&mpath)?)
        .map_err(|e| Error::format(&mpath, e.to_string()))?;
    if manifest.version != DATASET_VERSION {
        return Err(Error::format(
            &mpath,
            format!("version {} (expected {DATASET_VERSION})", manifest.version),
        ));
    }
    if manifest.n_frames != manifest.frames.len() {
        return Err(Error::Consistency(format!(
            "manifest declares {} frames but lists {}",
            manifest.n_frames,
            manifest.frames.len()
        )));
    }
    if manifest.scene.camera_poses.len() != manifest.n_frames {
        return Err(Error::Consistency("scene trajectory length differs from frame count".into()));
    }
    let [h, w] = manifest.resolution;
    let px = h * w;
    let mut frames = Vec::with_capacity(manifest.n_frames);
    for (k, ff) in manifest.frames.iter().enumerate() {
        let rgb_bytes = checked(dir, &ff.rgb, None, ff.crc32[0])?;
        let rgb = parse_ppm(&dir.join(&ff.rgb), &rgb_bytes, h, w)?;
        let depth = bytes_f32(&checked(dir, &ff.depth, Some(px * 4), ff.crc32[1])?);
        let local = bytes_f32(&checked(dir, &ff.ptmap_local, Some(px * 12), ff.crc32[2])?);
        let global = bytes_f32(&checked(dir, &ff.ptmap_global, Some(px * 12), ff.crc32[3])?);
        let pose_path = dir.join(&ff.pose);
        let pose: PoseFile = serde_json::from_slice(&checked(dir, &ff.pose, None, ff.crc32[4])?)
            .map_err(|e| Error::format(&pose_path, e.to_string()))?;
        let mask = checked(dir, &ff.mask, Some(px), ff.crc32[5])?;
        let pose = CameraPose::from(pose);
        pose.validate()?;
        frames.push(Frame {
            index: k + 1,
            height: h,
            width: w,
            rgb,
            depth,
            valid: mask.iter().map(|&b| b != 0).collect(),
            pose,
            ptmap_local: Pointmap::new(h, w, FrameOfReference::Local, local)?,
            ptmap_global: Pointmap::new(h, w, FrameOfReference::Global, global)?,
        });
    }
    // Extra frame files on disk beyond the manifest are also inconsistent.
    let listed = count_frame_files(dir, "depth_")?;
    if listed != manifest.n_frames {
        return Err(Error::Consistency(format!(
            "manifest lists {} frames, directory holds {listed}",
            manifest.n_frames
        )));
    }
    Ok(SceneSequence {
        seed: manifest.seed,
        metric_scale: manifest.metric_scale,
        frames,
        scene: manifest.scene,
    })
}

/// Frame-at-a-time RGB access for streaming consumers.
pub struct RgbReader {
    dir: std::path::PathBuf,
    resolution: (usize, usize),
    files: Vec<(String, u32)>,
}

impl RgbReader {
    /// Reads and checks only the manifest.
    pub fn open(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST);
        let manifest: Manifest = serde_json::from_slice(&read_file(&mpath)?)
            .map_err(|e| Error::format(&mpath, e.to_string()))?;
        if manifest.version != DATASET_VERSION {
            return Err(Error::format(
                &mpath,
                format!("version {} (expected {DATASET_VERSION})", manifest.version),
            ));
        }
        if manifest.n_frames != manifest.frames.len() {
            return Err(Error::Consistency(format!(
                "manifest declares {} frames but lists {}",
                manifest.n_frames,
                manifest.frames.len()
            )));
        }
        let [h, w] = manifest.resolution;
        Ok(RgbReader {
            dir: dir.to_path_buf(),
            resolution: (h, w),
            files: manifest.frames.into_iter().map(|f| (f.rgb, f.crc32[0])).collect(),
        })
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.resolution
    }

    pub fn len(&self) -> usize {
        self.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }

    /// RGB of frame `t` (1-based) as `H x W x 3` floats in `[0, 1]`.
    pub fn read(&self, t: usize) -> Result<Vec<f32>> {
        let (name, crc) = t
            .checked_sub(1)
            .and_then(|i| self.files.get(i))
            .ok_or_else(|| Error::Contract(format!("frame {t} outside 1..={}", self.files.len())))?;
        let bytes = checked(&self.dir, name, None, *crc)?;
        let (h, w) = self.resolution;
        parse_ppm(&self.dir.join(name), &bytes, h, w)
    }
}

fn count_frame_files(dir: &Path, prefix: &str) -> Result<usize> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut n = 0;
    for e in entries {
        let e = e.map_err(|e| Error::io(dir, e))?;
        if e.file_name().to_string_lossy().starts_with(prefix) {
            n += 1;
        }
    }
    Ok(n)
}
