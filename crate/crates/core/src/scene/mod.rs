//! Gaussian primitives, camera poses and scene initialization.

pub mod sh;

use nalgebra::{Matrix3, Matrix4, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower bound applied to `exp(log_scale)` so local-to-world stays invertible.
pub const SCALE_FLOOR: f64 = 1e-6;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Scale actually used for rendering; zero derivative below the floor.
#[inline]
pub fn floored_scale(log_scale: f64) -> (f64, f64) {
    let s = log_scale.exp();
    if s < SCALE_FLOOR {
        (SCALE_FLOOR, 0.0)
    } else {
        (s, s)
    }
}

/// Rotation matrix of the normalized quaternion `(w, x, y, z)`.
pub fn quat_to_rotation(q: &[f64; 4]) -> Matrix3<f64> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Backpropagates `dL/dR` to the raw (unnormalized) quaternion.
pub fn quat_to_rotation_backward(q: &[f64; 4], d_r: &Matrix3<f64>) -> [f64; 4] {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    let g = |m: [f64; 9]| -> f64 {
        let mut s = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                s += d_r[(i, j)] * m[i * 3 + j];
            }
        }
        s
    };
    let gw = g([0.0, -2.0 * z, 2.0 * y, 2.0 * z, 0.0, -2.0 * x, -2.0 * y, 2.0 * x, 0.0]);
    let gx = g([0.0, 2.0 * y, 2.0 * z, 2.0 * y, -4.0 * x, -2.0 * w, 2.0 * z, 2.0 * w, -4.0 * x]);
    let gy = g([-4.0 * y, 2.0 * x, 2.0 * w, 2.0 * x, 0.0, 2.0 * z, -2.0 * w, 2.0 * z, -4.0 * y]);
    let gz = g([-4.0 * z, -2.0 * w, 2.0 * x, 2.0 * w, -4.0 * z, 2.0 * y, 2.0 * x, 2.0 * y, 0.0]);
    let gn = [gw, gx, gy, gz];
    let qn = [w, x, y, z];
    let dot: f64 = gn.iter().zip(&qn).map(|(a, b)| a * b).sum();
    [0, 1, 2, 3].map(|k| (gn[k] - qn[k] * dot) / n)
}

/// One anisotropic Gaussian primitive.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian3D {
    pub mu: Vector3<f64>,
    /// `(w, x, y, z)`, unit norm.
    pub quat: [f64; 4],
    pub log_scale: Vector3<f64>,
    pub raw_opacity: f64,
    /// `[k][channel]` flattened, `(degree+1)² × 3` values.
    pub sh: Vec<f64>,
}

impl Gaussian3D {
    pub fn opacity(&self) -> f64 {
        sigmoid(self.raw_opacity)
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        quat_to_rotation(&self.quat)
    }

    pub fn scales(&self) -> Vector3<f64> {
        self.log_scale.map(|l| floored_scale(l).0)
    }

    /// `R S`, the linear part of the local-to-world transform.
    pub fn rs(&self) -> Matrix3<f64> {
        self.rotation() * Matrix3::from_diagonal(&self.scales())
    }
}

pub fn covariance(g: &Gaussian3D) -> Matrix3<f64> {
    let m = g.rs();
    let c = m * m.transpose();
    (c + c.transpose()) * 0.5
}

/// Homogeneous `[[R S, μ], [0, 1]]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalToWorld {
    pub m: Matrix4<f64>,
}

pub fn local_to_world(g: &Gaussian3D) -> LocalToWorld {
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&g.rs());
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&g.mu);
    LocalToWorld { m }
}

/// World-to-camera rigid transform and ERP resolution of one view.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraPose {
    pub world_to_cam: Matrix4<f64>,
    pub width: usize,
    pub height: usize,
    pub image_id: usize,
}

impl CameraPose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>, width: usize, height: usize, image_id: usize) -> Self {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&translation);
        Self { world_to_cam: m, width, height, image_id }
    }

    /// Camera placed at `center` with camera-to-world rotation `cam_to_world`.
    pub fn from_center(cam_to_world: Matrix3<f64>, center: Vector3<f64>, width: usize, height: usize, image_id: usize) -> Self {
        let r = cam_to_world.transpose();
        Self::new(r, -(r * center), width, height, image_id)
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.world_to_cam.fixed_view::<3, 3>(0, 0).into()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.world_to_cam.fixed_view::<3, 1>(0, 3).into()
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.translation())
    }

    /// Max deviation of the rotation block from orthonormality, and its determinant.
    pub fn rotation_error(&self) -> (f64, f64) {
        let r = self.rotation();
        let e = (r.transpose() * r - Matrix3::identity()).abs().max();
        (e, r.determinant())
    }
}

/// Gaussians stored as flat per-attribute arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub sh_degree: usize,
    pub mu: Vec<f64>,
    pub quat: Vec<f64>,
    pub log_scale: Vec<f64>,
    pub raw_opacity: Vec<f64>,
    pub sh: Vec<f64>,
}

impl Scene {
    pub fn empty(sh_degree: usize) -> Self {
        assert!(sh_degree <= sh::MAX_SH_DEGREE);
        Self { sh_degree, mu: vec![], quat: vec![], log_scale: vec![], raw_opacity: vec![], sh: vec![] }
    }

    pub fn from_gaussians(sh_degree: usize, gaussians: &[Gaussian3D]) -> Self {
        let mut s = Self::empty(sh_degree);
        for g in gaussians {
            s.push(g);
        }
        s
    }

    pub fn len(&self) -> usize {
        self.raw_opacity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw_opacity.is_empty()
    }

    /// SH values per Gaussian (coefficients × 3 channels).
    pub fn sh_stride(&self) -> usize {
        sh::coeff_count(self.sh_degree) * 3
    }

    pub fn push(&mut self, g: &Gaussian3D) {
        assert_eq!(g.sh.len(), self.sh_stride());
        self.mu.extend(g.mu.iter());
        self.quat.extend(g.quat);
        self.log_scale.extend(g.log_scale.iter());
        self.raw_opacity.push(g.raw_opacity);
        self.sh.extend(&g.sh);
    }

    pub fn mu_of(&self, i: usize) -> Vector3<f64> {
        Vector3::new(self.mu[3 * i], self.mu[3 * i + 1], self.mu[3 * i + 2])
    }

    pub fn quat_of(&self, i: usize) -> [f64; 4] {
        [self.quat[4 * i], self.quat[4 * i + 1], self.quat[4 * i + 2], self.quat[4 * i + 3]]
    }

    pub fn log_scale_of(&self, i: usize) -> Vector3<f64> {
        Vector3::new(self.log_scale[3 * i], self.log_scale[3 * i + 1], self.log_scale[3 * i + 2])
    }

    pub fn sh_of(&self, i: usize) -> &[f64] {
        let k = self.sh_stride();
        &self.sh[i * k..(i + 1) * k]
    }

    pub fn gaussian(&self, i: usize) -> Gaussian3D {
        Gaussian3D {
            mu: self.mu_of(i),
            quat: self.quat_of(i),
            log_scale: self.log_scale_of(i),
            raw_opacity: self.raw_opacity[i],
            sh: self.sh_of(i).to_vec(),
        }
    }

    pub fn gaussians(&self) -> Vec<Gaussian3D> {
        (0..self.len()).map(|i| self.gaussian(i)).collect()
    }

    pub fn normalize_quats(&mut self) {
        for q in self.quat.chunks_exact_mut(4) {
            let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                q.iter_mut().for_each(|v| *v /= n);
            } else {
                q.copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
            }
        }
    }

    /// Radius of the smallest origin-free bound: max distance of any center
    /// from the centroid.
    pub fn bounding_radius(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let n = self.len() as f64;
        let c = (0..self.len()).fold(Vector3::zeros(), |acc, i| acc + self.mu_of(i)) / n;
        (0..self.len()).map(|i| (self.mu_of(i) - c).norm()).fold(0.0, f64::max)
    }
}

pub fn sh_to_rgb(sh_coeffs: &[f64], dir: &Vector3<f64>, active_degree: usize) -> [f64; 3] {
    sh::eval_unclamped(sh_coeffs, dir, active_degree).map(|v| v.max(0.0))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RandomFallback {
    pub count: usize,
    pub radius: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct InitConfig {
    pub sh_degree: usize,
    pub initial_opacity: f64,
    /// Scale used when a point has no neighbours.
    pub lone_point_scale: f64,
    pub fallback: Option<RandomFallback>,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self { sh_degree: 3, initial_opacity: 0.1, lone_point_scale: 0.01, fallback: None }
    }
}

/// Mean distance to the `k` nearest other points, for every point.
fn mean_knn_distance(points: &[Vector3<f64>], k: usize) -> Vec<Option<f64>> {
    // Brute force; inputs here are at most a few tens of thousands of points.
    points
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut best = [f64::INFINITY; 8];
            let k = k.min(best.len());
            for (j, q) in points.iter().enumerate() {
                if i == j {
                    continue;
                }
                let d = (p - q).norm_squared();
                if d < best[k - 1] {
                    let mut pos = k - 1;
                    while pos > 0 && best[pos - 1] > d {
                        best[pos] = best[pos - 1];
                        pos -= 1;
                    }
                    best[pos] = d;
                }
            }
            let found: Vec<f64> = best[..k].iter().copied().filter(|d| d.is_finite()).collect();
            if found.is_empty() {
                None
            } else {
                Some(found.iter().map(|d| d.sqrt()).sum::<f64>() / found.len() as f64)
            }
        })
        .collect()
}

/// One Gaussian per input point (or per random fallback point).
pub fn init_scene(points: &[(Vector3<f64>, [f64; 3])], cfg: &InitConfig) -> Result<Scene> {
    let generated;
    let points = if points.is_empty() {
        let fb = cfg.fallback.as_ref().ok_or(Error::EmptyInput)?;
        if fb.count == 0 {
            return Err(Error::EmptyInput);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(fb.seed);
        generated = (0..fb.count)
            .map(|_| loop {
                let v = Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                );
                if v.norm_squared() <= 1.0 {
                    let c = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
                    break (v * fb.radius, c);
                }
            })
            .collect::<Vec<_>>();
        &generated[..]
    } else {
        points
    };

    let positions: Vec<Vector3<f64>> = points.iter().map(|p| p.0).collect();
    let dists = mean_knn_distance(&positions, 3);
    let raw_opacity = logit(cfg.initial_opacity);
    let stride = sh::coeff_count(cfg.sh_degree) * 3;
    let mut scene = Scene::empty(cfg.sh_degree);
    for ((pos, color), dist) in points.iter().zip(dists) {
        let s = dist.unwrap_or(cfg.lone_point_scale).max(SCALE_FLOOR);
        let mut coeffs = vec![0.0; stride];
        coeffs[..3].copy_from_slice(&sh::rgb_to_dc(*color));
        scene.push(&Gaussian3D {
            mu: *pos,
            quat: [1.0, 0.0, 0.0, 0.0],
            log_scale: Vector3::repeat(s.ln()),
            raw_opacity,
            sh: coeffs,
        });
    }
    Ok(scene)
}
