//! Dataset directories: a `transforms.json` manifest, observed panoramas and
//! optional ground-truth layers and point cloud.
//!
//! ```json
//! {
//!   "version": 1,
//!   "frames": [
//!     { "file": "frame_000.png", "w2c": [16 numbers, row-major], "width": 128, "height": 64,
//!       "gt_radiance": "gt_radiance_000.png", "gt_depth": "gt_depth_000.png" }
//!   ],
//!   "split": { "train": [0, 2], "test": [1, 3] },
//!   "points": "points3d.txt"
//! }
//! ```
//!
//! Each frame carries exactly one of `w2c` (world-to-camera) or `c2w`
//! (camera-to-world). `split` defaults to even indices for training and odd
//! for testing. `points` lines are `x y z r g b` with colors in `[0, 1]`.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use super::png;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::scene::CameraPose;

pub const MANIFEST_NAME: &str = "transforms.json";
pub const MANIFEST_VERSION: u32 = 1;
/// Rotation-block deviations above this are reported as warnings.
pub const POSE_WARN_TOL: f64 = 1e-4;
/// Rotation-block deviations above this are rejected.
pub const POSE_ERROR_TOL: f64 = 1e-2;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FrameEntry {
    pub file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w2c: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c2w: Option<Vec<f64>>,
    pub width: usize,
    pub height: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_radiance: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_depth: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Ground-truth medium coefficients of a synthetic dataset.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct MediumTruth {
    pub beta_d: [f64; 3],
    pub beta_b: [f64; 3],
    pub b_inf: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub frames: Vec<FrameEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub medium_truth: Option<MediumTruth>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub name: String,
    pub pose: CameraPose,
    pub image: Image,
    pub gt_radiance: Option<Image>,
    pub gt_depth: Option<Image>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub frames: Vec<Frame>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub points: Vec<(Vector3<f64>, [f64; 3])>,
    pub medium_truth: Option<MediumTruth>,
    /// Non-fatal validation findings.
    pub warnings: Vec<String>,
}

/// Even indices train, odd indices test.
pub fn alternating_split(n: usize) -> Split {
    Split { train: (0..n).step_by(2).collect(), test: (1..n).step_by(2).collect() }
}

pub fn matrix_to_row_major(m: &Matrix4<f64>) -> Vec<f64> {
    (0..4).flat_map(|r| (0..4).map(move |c| m[(r, c)])).collect()
}

/// Validates and converts a manifest pose; returns the pose and an optional warning.
pub fn parse_pose(entry: &FrameEntry, frame: usize) -> Result<(CameraPose, Option<String>)> {
    let bad = |reason: String| Error::BadPose { frame, reason };
    let (values, is_w2c) = match (&entry.w2c, &entry.c2w) {
        (Some(v), None) => (v, true),
        (None, Some(v)) => (v, false),
        (Some(_), Some(_)) => return Err(bad("both w2c and c2w given".into())),
        (None, None) => return Err(bad("neither w2c nor c2w given".into())),
    };
    if values.len() != 16 {
        return Err(bad(format!("expected 16 numbers, found {}", values.len())));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(bad("non-finite entry".into()));
    }
    let m = Matrix4::from_row_slice(values);
    let last = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
    if (last[0].abs() + last[1].abs() + last[2].abs() + (last[3] - 1.0).abs()) > 1e-9 {
        return Err(bad(format!("last row must be [0, 0, 0, 1], found {last:?}")));
    }
    let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into();
    let t: Vector3<f64> = m.fixed_view::<3, 1>(0, 3).into();
    let err = (r.transpose() * r - Matrix3::identity()).abs().max();
    if err > POSE_ERROR_TOL || r.determinant() <= 0.0 {
        return Err(bad(format!("rotation block is not a proper rotation (orthonormality error {err:.3e})")));
    }
    let warning = (err > POSE_WARN_TOL).then(|| format!("frame {frame}: rotation orthonormality error {err:.3e}"));
    let pose = if is_w2c {
        CameraPose::new(r, t, entry.width, entry.height, frame)
    } else {
        CameraPose::from_center(r, t, entry.width, entry.height, frame)
    };
    Ok((pose, warning))
}

fn check_size(path: &Path, img: &Image, entry: &FrameEntry) -> Result<()> {
    if (img.width, img.height) != (entry.width, entry.height) {
        return Err(Error::SizeMismatch {
            path: path.to_path_buf(),
            expected: (entry.width, entry.height),
            found: (img.width, img.height),
        });
    }
    Ok(())
}

pub fn read_points(path: &Path) -> Result<Vec<(Vector3<f64>, [f64; 3])>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: std::result::Result<Vec<f64>, _> = line.split_whitespace().map(str::parse::<f64>).collect();
        let vals = vals.map_err(|e| Error::BadManifest(format!("{}:{}: {e}", path.display(), n + 1)))?;
        if vals.len() != 6 || vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::BadManifest(format!("{}:{}: expected 6 finite numbers", path.display(), n + 1)));
        }
        out.push((Vector3::new(vals[0], vals[1], vals[2]), [vals[3], vals[4], vals[5]]));
    }
    Ok(out)
}

pub fn write_points(path: &Path, points: &[(Vector3<f64>, [f64; 3])]) -> Result<()> {
    let mut s = String::from("# x y z r g b\n");
    for (p, c) in points {
        s.push_str(&format!("{:e} {:e} {:e} {:e} {:e} {:e}\n", p.x, p.y, p.z, c[0], c[1], c[2]));
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_NAME);
    if !path.is_file() {
        return Err(Error::MissingManifest(path));
    }
    let text = fs::read_to_string(&path)?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::BadManifest(e.to_string()))?;
    if m.version != MANIFEST_VERSION {
        return Err(Error::BadManifest(format!("unsupported manifest version {}", m.version)));
    }
    Ok(m)
}

pub fn write_manifest(dir: &Path, m: &Manifest) -> Result<()> {
    let text = serde_json::to_string_pretty(m).map_err(|e| Error::BadManifest(e.to_string()))?;
    fs::write(dir.join(MANIFEST_NAME), text)?;
    Ok(())
}

fn validate_split(split: &Split, n: usize) -> Result<()> {
    for &i in split.train.iter().chain(&split.test) {
        if i >= n {
            return Err(Error::BadManifest(format!("split index {i} out of range for {n} frames")));
        }
    }
    Ok(())
}

fn frame_name(entry: &FrameEntry, k: usize) -> String {
    Path::new(&entry.file).file_stem().map_or_else(|| format!("frame_{k:03}"), |s| s.to_string_lossy().into_owned())
}

/// Named poses of a manifest, without reading any image.
pub fn load_poses(dir: &Path) -> Result<Vec<(String, CameraPose)>> {
    let manifest = read_manifest(dir)?;
    manifest
        .frames
        .iter()
        .enumerate()
        .map(|(k, entry)| Ok((frame_name(entry, k), parse_pose(entry, k)?.0)))
        .collect()
}

/// Loads every frame in manifest order.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let mut warnings = Vec::new();
    let mut frames = Vec::with_capacity(manifest.frames.len());
    for (k, entry) in manifest.frames.iter().enumerate() {
        let (pose, warn) = parse_pose(entry, k)?;
        warnings.extend(warn);
        let path: PathBuf = dir.join(&entry.file);
        let image = png::read_image(&path)?;
        check_size(&path, &image, entry)?;
        let gt_radiance = match &entry.gt_radiance {
            Some(f) => {
                let p = dir.join(f);
                let img = png::read_image(&p)?;
                check_size(&p, &img, entry)?;
                Some(img)
            }
            None => None,
        };
        let gt_depth = match &entry.gt_depth {
            Some(f) => {
                let p = dir.join(f);
                let img = png::read_depth(&p)?;
                check_size(&p, &img, entry)?;
                Some(img)
            }
            None => None,
        };
        let name = frame_name(entry, k);
        frames.push(Frame { name, pose, image, gt_radiance, gt_depth });
    }
    let split = manifest.split.clone().unwrap_or_else(|| alternating_split(frames.len()));
    validate_split(&split, frames.len())?;
    let points = match &manifest.points {
        Some(f) => read_points(&dir.join(f))?,
        None => Vec::new(),
    };
    Ok(Dataset { frames, train: split.train, test: split.test, points, medium_truth: manifest.medium_truth, warnings })
}

/// Writes a dataset in the layout read by [`load_dataset`]; ground-truth
/// layers use the `gt_` prefix.
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(ds.frames.len());
    for (k, f) in ds.frames.iter().enumerate() {
        let file = format!("frame_{k:03}.png");
        png::write_image(&dir.join(&file), &f.image, true)?;
        let gt_radiance = match &f.gt_radiance {
            Some(img) => {
                let name = format!("gt_radiance_{k:03}.png");
                png::write_image(&dir.join(&name), img, true)?;
                Some(name)
            }
            None => None,
        };
        let gt_depth = match &f.gt_depth {
            Some(img) => {
                let name = format!("gt_depth_{k:03}.png");
                png::write_depth(&dir.join(&name), img)?;
                Some(name)
            }
            None => None,
        };
        entries.push(FrameEntry {
            file,
            w2c: Some(matrix_to_row_major(&f.pose.world_to_cam)),
            c2w: None,
            width: f.pose.width,
            height: f.pose.height,
            gt_radiance,
            gt_depth,
        });
    }
    let points = if ds.points.is_empty() {
        None
    } else {
        write_points(&dir.join("points3d.txt"), &ds.points)?;
        Some("points3d.txt".to_string())
    };
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        frames: entries,
        split: Some(Split { train: ds.train.clone(), test: ds.test.clone() }),
        points,
        medium_truth: ds.medium_truth,
    };
    write_manifest(dir, &manifest)
}
