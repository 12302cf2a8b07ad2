//! Synthetic "sphere room" benchmark: cameras inside a textured sphere, with
//! closed-form radiance and depth, degraded by the textbook underwater model.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diff::{self, Model, PipelineConfig, ViewForward};
use crate::erp::ErpGrid;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::io::{self, Dataset, Frame, MediumTruth};
use crate::medium::simulate_uifm_gt;
use crate::optim::{loss, TrainState};
use crate::scene::CameraPose;

pub use crate::optim::loss::psnr;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SphereRoomConfig {
    pub radius: f64,
    pub width: usize,
    pub height: usize,
    pub cameras: usize,
    /// Camera centers are drawn uniformly from a ball of this fraction of the radius.
    pub camera_spread: f64,
    pub texture_degree: usize,
    pub seed: u64,
    pub beta_d: [f64; 3],
    pub beta_b: [f64; 3],
    pub b_inf: [f64; 3],
    /// Number of noisy surface samples written as the initial point cloud.
    pub points: usize,
    /// Standard deviation of the point positions, as a fraction of the radius.
    pub point_noise: f64,
}

impl Default for SphereRoomConfig {
    fn default() -> Self {
        Self {
            radius: 5.0,
            width: 128,
            height: 64,
            cameras: 12,
            camera_spread: 0.4,
            texture_degree: 4,
            seed: 7,
            beta_d: [0.08, 0.05, 0.03],
            beta_b: [0.05, 0.07, 0.10],
            b_inf: [0.08, 0.18, 0.25],
            points: 4000,
            point_noise: 0.005,
        }
    }
}

/// Real spherical harmonics of all orders up to `degree`, in `(l, m)` order
/// with `m` from `-l` to `l`; orthonormal on the sphere.
pub fn real_sh_all(dir: &Vector3<f64>, degree: usize) -> Vec<f64> {
    let z = dir.z.clamp(-1.0, 1.0);
    let phi = dir.y.atan2(dir.x);
    let s = (1.0 - z * z).max(0.0).sqrt();
    // Associated Legendre P_l^m(z), without the Condon–Shortley phase.
    let mut p = vec![vec![0.0; degree + 1]; degree + 1];
    p[0][0] = 1.0;
    for m in 1..=degree {
        p[m][m] = p[m - 1][m - 1] * (2 * m - 1) as f64 * s;
    }
    for m in 0..degree {
        p[m + 1][m] = (2 * m + 1) as f64 * z * p[m][m];
    }
    for m in 0..=degree {
        for l in m + 2..=degree {
            p[l][m] = ((2 * l - 1) as f64 * z * p[l - 1][m] - (l + m - 1) as f64 * p[l - 2][m]) / (l - m) as f64;
        }
    }
    let fact = |n: usize| (1..=n).fold(1.0, |a, k| a * k as f64);
    let mut out = Vec::with_capacity((degree + 1) * (degree + 1));
    for l in 0..=degree {
        for mi in -(l as i64)..=(l as i64) {
            let m = mi.unsigned_abs() as usize;
            let k = ((2 * l + 1) as f64 / (4.0 * PI) * fact(l - m) / fact(l + m)).sqrt();
            let v = match mi.signum() {
                0 => k * p[l][0],
                1 => 2f64.sqrt() * k * (m as f64 * phi).cos() * p[l][m],
                _ => 2f64.sqrt() * k * (m as f64 * phi).sin() * p[l][m],
            };
            out.push(v);
        }
    }
    out
}

/// Smooth random color pattern on the unit sphere: a squashed random
/// combination of real SH bands up to a fixed degree.
#[derive(Debug, Clone, PartialEq)]
pub struct Texture {
    pub degree: usize,
    pub base: [f64; 3],
    /// `(degree + 1)²` coefficients per channel; entry 0 is unused.
    pub coeffs: Vec<[f64; 3]>,
}

impl Texture {
    pub fn random(degree: usize, rng: &mut impl Rng) -> Self {
        let base = [0, 1, 2].map(|_| rng.random_range(-0.6..0.6));
        let mut coeffs = vec![[0.0; 3]; (degree + 1) * (degree + 1)];
        for l in 1..=degree {
            let amp = 1.2 / l as f64;
            for m in 0..2 * l + 1 {
                let k = l * l + m;
                coeffs[k] = [0, 1, 2].map(|_| amp * rng.sample::<f64, _>(StandardNormal));
            }
        }
        Self { degree, base, coeffs }
    }

    /// Color of the surface point in direction `u` from the room center, in `(0.15, 0.85)`.
    pub fn color(&self, u: &Vector3<f64>) -> [f64; 3] {
        let y = real_sh_all(u, self.degree);
        [0, 1, 2].map(|c| {
            let s: f64 = self.base[c] + (1..y.len()).map(|k| y[k] * self.coeffs[k][c]).sum::<f64>();
            0.5 + 0.35 * s.tanh()
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SphereRoom {
    pub radius: f64,
    pub texture: Texture,
    pub cameras: Vec<CameraPose>,
    pub medium: MediumTruth,
}

/// Positive root of `|o + t d| = R` for a camera strictly inside the sphere.
pub fn analytic_depth(radius: f64, o: &Vector3<f64>, d: &Vector3<f64>) -> f64 {
    let od = o.dot(d);
    -od + (od * od + radius * radius - o.norm_squared()).sqrt()
}

pub fn build_room(cfg: &SphereRoomConfig) -> SphereRoom {
    assert!(cfg.camera_spread < 0.8, "cameras must stay well inside the sphere");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let texture = Texture::random(cfg.texture_degree, &mut rng);
    let cameras = (0..cfg.cameras)
        .map(|k| {
            let center = loop {
                let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                if v.norm() <= 1.0 {
                    break v * cfg.spread_radius();
                }
            };
            let yaw = rng.random_range(-PI..PI);
            let c2w: Matrix3<f64> = Rotation3::from_axis_angle(&Vector3::y_axis(), yaw).into_inner();
            CameraPose::from_center(c2w, center, cfg.width, cfg.height, k)
        })
        .collect();
    SphereRoom {
        radius: cfg.radius,
        texture,
        cameras,
        medium: MediumTruth { beta_d: cfg.beta_d, beta_b: cfg.beta_b, b_inf: cfg.b_inf },
    }
}

impl SphereRoomConfig {
    fn spread_radius(&self) -> f64 {
        self.camera_spread * self.radius
    }
}

/// Clean radiance and ray depth seen from `pose`.
pub fn render_ground_truth(room: &SphereRoom, pose: &CameraPose) -> (Image, Image) {
    let grid = ErpGrid::new(pose.width, pose.height);
    let c2w = pose.rotation().transpose();
    let o = pose.center();
    let per: Vec<([f64; 3], f64)> = (0..pose.width * pose.height)
        .into_par_iter()
        .map(|k| {
            let (x, y) = (k % pose.width, k / pose.width);
            let d = c2w * grid.ray(x, y).0;
            let t = analytic_depth(room.radius, &o, &d);
            (room.texture.color(&((o + d * t) / room.radius)), t)
        })
        .collect();
    let j = Image { width: pose.width, height: pose.height, channels: 3, data: per.iter().flat_map(|p| p.0).collect() };
    let d = Image { width: pose.width, height: pose.height, channels: 1, data: per.iter().map(|p| p.1).collect() };
    (j, d)
}

/// Noisy surface samples colored as observed (through the medium) from `observer`.
pub fn sample_points(room: &SphereRoom, observer: &Vector3<f64>, count: usize, noise: f64, seed: u64) -> Vec<(Vector3<f64>, [f64; 3])> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise * room.radius).expect("finite std");
    let m = &room.medium;
    (0..count)
        .map(|_| {
            let u = Vector3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)).normalize();
            let surface = u * room.radius;
            let dist = (surface - observer).norm();
            let j = room.texture.color(&u);
            let color = [0, 1, 2].map(|c| {
                (j[c] * (-m.beta_d[c] * dist).exp() + m.b_inf[c] * (1.0 - (-m.beta_b[c] * dist).exp())).clamp(0.0, 1.0)
            });
            let p = surface + Vector3::new(normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng));
            (p, color)
        })
        .collect()
}

/// In-memory dataset: degraded observations, ground-truth layers, alternating split.
pub fn generate_dataset(room: &SphereRoom, cfg: &SphereRoomConfig) -> Dataset {
    let frames: Vec<Frame> = room
        .cameras
        .iter()
        .enumerate()
        .map(|(k, pose)| {
            let (j, d) = render_ground_truth(room, pose);
            let m = &room.medium;
            let image = simulate_uifm_gt(&j, &d, m.beta_d, m.beta_b, m.b_inf);
            Frame { name: format!("frame_{k:03}"), pose: pose.clone(), image, gt_radiance: Some(j), gt_depth: Some(d) }
        })
        .collect();
    let split = io::dataset::alternating_split(frames.len());
    let observer = room.cameras[split.train[0]].center();
    let points = sample_points(room, &observer, cfg.points, cfg.point_noise, cfg.seed.wrapping_add(1));
    Dataset { frames, train: split.train, test: split.test, points, medium_truth: Some(room.medium), warnings: vec![] }
}

/// Builds the room, writes the dataset to `dir` and returns it as loaded back.
pub fn write_sphere_room(dir: &Path, cfg: &SphereRoomConfig) -> Result<Dataset> {
    let room = build_room(cfg);
    let ds = generate_dataset(&room, cfg);
    io::write_dataset(dir, &ds)?;
    io::load_dataset(dir)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvalKind {
    /// Composed render `Î` vs. the observation.
    RawRender,
    /// Rendered clean radiance `J` vs. the ground-truth radiance.
    RestoredJ,
    /// Raw-render metrics, plus `J`, `A`, `B`, `D` dumps per view.
    Decomposition,
}

/// File names of the decomposition layers of one view.
pub fn decomposition_files(view_name: &str) -> [String; 4] {
    ["J", "A", "B", "D"].map(|l| format!("{l}_{view_name}.png"))
}

/// Writes the `J`, `A`, `B` and `D` layers of one rendered view as 16-bit
/// PNGs with scale sidecars. Without a medium `A` is one and `B` zero.
pub fn write_layers(dir: &Path, view_name: &str, f: &ViewForward) -> Result<()> {
    let (w, h) = (f.composed.width, f.composed.height);
    let (a, b) = match &f.maps {
        Some(m) => (m.a.clone(), m.b.clone()),
        None => (Image::filled(w, h, 3, 1.0), Image::new(w, h, 3)),
    };
    let names = decomposition_files(view_name);
    io::write_linear16(&dir.join(&names[0]), &f.render.radiance.clamped(0.0, f64::INFINITY))?;
    io::write_linear16(&dir.join(&names[1]), &a)?;
    io::write_linear16(&dir.join(&names[2]), &b)?;
    io::write_depth(&dir.join(&names[3]), &f.render.depth)?;
    Ok(())
}

/// Renders one view and writes its layers; returns the forward pass.
pub fn write_decomposition(
    dir: &Path,
    view_name: &str,
    model: &Model,
    pose: &CameraPose,
    filter: &[f64],
    cfg: &PipelineConfig,
) -> Result<ViewForward> {
    std::fs::create_dir_all(dir)?;
    let f = diff::forward_view(model, pose, Some(filter), cfg);
    write_layers(dir, view_name, &f)?;
    Ok(f)
}

/// Per-view metrics on the test split and their mean.
pub fn evaluate(
    state: &TrainState,
    dataset: &Dataset,
    which: EvalKind,
    cfg: &PipelineConfig,
    dump_dir: Option<&Path>,
) -> Result<(Metrics, Vec<Metrics>)> {
    let mut cfg = cfg.clone();
    cfg.render.active_sh_degree = state.active_sh_degree;
    if let Some(dir) = dump_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut per = Vec::with_capacity(dataset.test.len());
    for &i in &dataset.test {
        let frame = &dataset.frames[i];
        let f = diff::forward_view(&state.model, &frame.pose, Some(&state.filter), &cfg);
        let (pred, target) = match which {
            EvalKind::RawRender | EvalKind::Decomposition => (f.composed.clamped(0.0, 1.0), &frame.image),
            EvalKind::RestoredJ => {
                let gt = frame.gt_radiance.as_ref().ok_or(Error::MissingGroundTruth(i))?;
                (f.render.radiance.clamped(0.0, 1.0), gt)
            }
        };
        per.push(Metrics { psnr: loss::psnr(&pred, target)?, ssim: loss::ssim(&pred, target, &cfg.loss)? });
        if which == EvalKind::Decomposition {
            if let Some(dir) = dump_dir {
                write_layers(dir, &frame.name, &f)?;
            }
        }
    }
    let n = per.len().max(1) as f64;
    let mean = Metrics { psnr: per.iter().map(|m| m.psnr).sum::<f64>() / n, ssim: per.iter().map(|m| m.ssim).sum::<f64>() / n };
    Ok((mean, per))
}
