//! Pose-conditioned affine correction of each Gaussian's diffuse color.
//!
//! A pose MLP maps the camera pose to a view embedding `e_view`; a correction
//! MLP maps `(c⁰, e_view, γ(μ))` to channel-wise `(raw_eta, raw_beta)` and the
//! corrected diffuse color is `(1 + raw_eta) ⊙ c⁰ + raw_beta`. Higher-order SH
//! terms are untouched.

use std::f64::consts::PI;

use nalgebra::{DMatrix, Matrix3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::scene::{sh, CameraPose, Scene};

/// Two-layer perceptron `out = W₂ relu(W₁ x + b₁) + b₂`.
///
/// Parameters are one flat array: `W₁` (hidden × in, row-major), `b₁`,
/// `W₂` (out × hidden, row-major), `b₂`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub n_in: usize,
    pub n_hidden: usize,
    pub n_out: usize,
    pub params: Vec<f64>,
}

/// Activations kept for the backward pass of a batched evaluation.
#[derive(Debug, Clone)]
pub struct MlpCache {
    pub input: DMatrix<f64>,
    pub pre: DMatrix<f64>,
    pub hidden: DMatrix<f64>,
}

impl Mlp {
    pub fn param_count(n_in: usize, n_hidden: usize, n_out: usize) -> usize {
        n_hidden * n_in + n_hidden + n_out * n_hidden + n_out
    }

    pub fn zeros(n_in: usize, n_hidden: usize, n_out: usize) -> Self {
        Self { n_in, n_hidden, n_out, params: vec![0.0; Self::param_count(n_in, n_hidden, n_out)] }
    }

    /// Uniform `±1/√fan_in` initialization; `zero_last` zeroes the output layer.
    pub fn init(n_in: usize, n_hidden: usize, n_out: usize, zero_last: bool, rng: &mut impl Rng) -> Self {
        let mut m = Self::zeros(n_in, n_hidden, n_out);
        let (_, o2, _) = m.offsets();
        let b1 = 1.0 / (n_in as f64).sqrt();
        for v in &mut m.params[..o2] {
            *v = rng.random_range(-b1..b1);
        }
        if !zero_last {
            let b2 = 1.0 / (n_hidden as f64).sqrt();
            for v in &mut m.params[o2..] {
                *v = rng.random_range(-b2..b2);
            }
        }
        m
    }

    /// Start offsets of `b₁`, `W₂`, `b₂`.
    fn offsets(&self) -> (usize, usize, usize) {
        let o1 = self.n_hidden * self.n_in;
        let o2 = o1 + self.n_hidden;
        let o3 = o2 + self.n_out * self.n_hidden;
        (o1, o2, o3)
    }

    fn w1(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n_hidden, self.n_in, &self.params[..self.n_hidden * self.n_in])
    }

    fn w2(&self) -> DMatrix<f64> {
        let (_, o2, o3) = self.offsets();
        DMatrix::from_row_slice(self.n_out, self.n_hidden, &self.params[o2..o3])
    }

    /// Output-layer bias.
    pub fn b2(&self) -> &[f64] {
        let (_, _, o3) = self.offsets();
        &self.params[o3..]
    }

    /// Evaluates a batch (one sample per row).
    pub fn forward_batch(&self, input: DMatrix<f64>) -> (DMatrix<f64>, MlpCache) {
        assert_eq!(input.ncols(), self.n_in);
        let (o1, o2, o3) = self.offsets();
        let mut pre = &input * self.w1().transpose();
        for mut row in pre.row_iter_mut() {
            for (v, b) in row.iter_mut().zip(&self.params[o1..o2]) {
                *v += b;
            }
        }
        let hidden = pre.map(|v| if v > 0.0 { v } else { 0.0 });
        let mut out = &hidden * self.w2().transpose();
        for mut row in out.row_iter_mut() {
            for (v, b) in row.iter_mut().zip(&self.params[o3..]) {
                *v += b;
            }
        }
        (out, MlpCache { input, pre, hidden })
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let (out, _) = self.forward_batch(DMatrix::from_row_slice(1, x.len(), x));
        out.iter().copied().collect()
    }

    /// Returns `(d params, d input)` for upstream gradient `d_out` (batch × out).
    pub fn backward_batch(&self, cache: &MlpCache, d_out: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
        let (o1, o2, o3) = self.offsets();
        let mut grad = vec![0.0; self.params.len()];
        let d_w2 = d_out.transpose() * &cache.hidden;
        for r in 0..self.n_out {
            for c in 0..self.n_hidden {
                grad[o2 + r * self.n_hidden + c] = d_w2[(r, c)];
            }
        }
        for c in 0..self.n_out {
            grad[o3 + c] = d_out.column(c).iter().sum();
        }
        let mut d_pre = d_out * self.w2();
        d_pre.zip_apply(&cache.pre, |g, z| {
            if z <= 0.0 {
                *g = 0.0;
            }
        });
        let d_w1 = d_pre.transpose() * &cache.input;
        for r in 0..self.n_hidden {
            for c in 0..self.n_in {
                grad[r * self.n_in + c] = d_w1[(r, c)];
            }
        }
        for c in 0..self.n_hidden {
            grad[o1 + c] = d_pre.column(c).iter().sum();
        }
        let d_in = d_pre * self.w1();
        (grad, d_in)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct AppearanceConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub fourier_bands: usize,
}

impl Default for AppearanceConfig {
    fn default() -> Self {
        Self { embed_dim: 32, hidden: 128, fourier_bands: 4 }
    }
}

pub const POSE_ENCODING_DIM: usize = 7;

#[derive(Debug, Clone, PartialEq)]
pub struct AppearanceNet {
    pub pose_mlp: Mlp,
    pub correct_mlp: Mlp,
    pub embed_dim: usize,
    pub fourier_bands: usize,
    /// Positions are divided by this before Fourier encoding.
    pub position_scale: f64,
}

impl AppearanceNet {
    pub fn new(cfg: &AppearanceConfig, position_scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pose_mlp = Mlp::init(POSE_ENCODING_DIM, cfg.hidden, cfg.embed_dim, false, &mut rng);
        let correct_in = 3 + cfg.embed_dim + 6 * cfg.fourier_bands;
        let correct_mlp = Mlp::init(correct_in, cfg.hidden, 6, true, &mut rng);
        Self { pose_mlp, correct_mlp, embed_dim: cfg.embed_dim, fourier_bands: cfg.fourier_bands, position_scale }
    }

    pub fn correct_input_dim(&self) -> usize {
        3 + self.embed_dim + 6 * self.fourier_bands
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewEmbedding(pub Vec<f64>);

/// Quaternion `(w, x, y, z)` with a nonnegative scalar part; ties at `w = 0`
/// are broken by making the first nonzero vector component positive.
pub fn canonical_quat(q: [f64; 4]) -> [f64; 4] {
    let flip = match q.iter().find(|v| **v != 0.0) {
        Some(v) => *v < 0.0,
        None => false,
    };
    if flip {
        q.map(|v| -v)
    } else {
        q
    }
}

/// `center ⊕ canonical quaternion` for a camera-to-world orientation given as a quaternion.
pub fn pose_encoding_from_quat(center: &Vector3<f64>, q: [f64; 4]) -> [f64; 7] {
    let q = canonical_quat(q);
    [center.x, center.y, center.z, q[0], q[1], q[2], q[3]]
}

pub fn pose_encoding(pose: &CameraPose) -> [f64; 7] {
    let r: Matrix3<f64> = pose.rotation().transpose();
    let q = UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(r));
    pose_encoding_from_quat(&pose.center(), [q.w, q.i, q.j, q.k])
}

pub fn encode_encoding(enc: &[f64; 7], net: &AppearanceNet) -> ViewEmbedding {
    ViewEmbedding(net.pose_mlp.forward(enc))
}

pub fn encode_pose(pose: &CameraPose, net: &AppearanceNet) -> ViewEmbedding {
    encode_encoding(&pose_encoding(pose), net)
}

/// `[sin(2ᵏπμₐ), cos(2ᵏπμₐ)]` for `k < bands`, `a ∈ {x, y, z}`.
pub fn fourier_features(mu: &Vector3<f64>, bands: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(6 * bands);
    for k in 0..bands {
        let f = (1u64 << k) as f64 * PI;
        for a in 0..3 {
            let (s, c) = (f * mu[a]).sin_cos();
            out.push(s);
            out.push(c);
        }
    }
    out
}

/// `d γ / d μ` contracted with `d_gamma`.
pub fn fourier_features_backward(mu: &Vector3<f64>, bands: usize, d_gamma: &[f64]) -> Vector3<f64> {
    let mut g = Vector3::zeros();
    for k in 0..bands {
        let f = (1u64 << k) as f64 * PI;
        for a in 0..3 {
            let (s, c) = (f * mu[a]).sin_cos();
            let i = 6 * k + 2 * a;
            g[a] += f * c * d_gamma[i] - f * s * d_gamma[i + 1];
        }
    }
    g
}

fn correct_input_row(c0: &[f64; 3], e_view: &[f64], gamma: &[f64]) -> Vec<f64> {
    let mut row = Vec::with_capacity(3 + e_view.len() + gamma.len());
    row.extend_from_slice(c0);
    row.extend_from_slice(e_view);
    row.extend_from_slice(gamma);
    row
}

#[inline]
fn apply_affine(c0: &[f64; 3], out: &[f64]) -> [f64; 3] {
    [0, 1, 2].map(|c| (1.0 + out[c]) * c0[c] + out[3 + c])
}

pub fn correct_color(c0: [f64; 3], e_view: &ViewEmbedding, gamma_mu: &[f64], net: &AppearanceNet) -> [f64; 3] {
    let out = net.correct_mlp.forward(&correct_input_row(&c0, &e_view.0, gamma_mu));
    apply_affine(&c0, &out)
}

/// Per-view inputs for color correction.
#[derive(Debug, Clone, Copy)]
pub struct AppearanceCtx<'a> {
    pub net: &'a AppearanceNet,
    pub e_view: &'a ViewEmbedding,
}

/// Intermediates of [`gaussian_colors`] needed by [`gaussian_colors_backward`].
#[derive(Debug, Clone)]
pub struct ColorCache {
    pub dirs: Vec<Vector3<f64>>,
    pub dists: Vec<f64>,
    pub c0: Vec<[f64; 3]>,
    pub unclamped: Vec<[f64; 3]>,
    pub mlp_out: Option<DMatrix<f64>>,
    pub mlp: Option<MlpCache>,
}

#[derive(Debug, Clone)]
pub struct ColorGrads {
    pub sh: Vec<f64>,
    pub mu: Vec<f64>,
    pub correct_mlp: Vec<f64>,
    pub e_view: Vec<f64>,
}

fn view_dir(scene: &Scene, i: usize, center: &Vector3<f64>) -> (Vector3<f64>, f64) {
    let v = scene.mu_of(i) - center;
    let n = v.norm();
    if n > 0.0 {
        (v / n, n)
    } else {
        (Vector3::new(0.0, 0.0, 1.0), 0.0)
    }
}

/// Higher-order SH part `Σ_{k≥1} Y_k c_k`.
fn sh_rest(coeffs: &[f64], dir: &Vector3<f64>, active_degree: usize) -> [f64; 3] {
    let b = sh::basis(dir, active_degree);
    let mut rgb = [0.0; 3];
    for (k, bk) in b.iter().enumerate().take(sh::coeff_count(active_degree)).skip(1) {
        for (c, v) in rgb.iter_mut().enumerate() {
            *v += bk * coeffs[k * 3 + c];
        }
    }
    rgb
}

/// View-dependent color of every Gaussian, with optional diffuse correction.
pub fn gaussian_colors(
    scene: &Scene,
    pose: &CameraPose,
    appearance: Option<AppearanceCtx<'_>>,
    active_degree: usize,
) -> (Vec<[f64; 3]>, ColorCache) {
    let n = scene.len();
    let degree = active_degree.min(scene.sh_degree);
    let center = pose.center();
    let (dirs, dists): (Vec<_>, Vec<_>) = (0..n).into_par_iter().map(|i| view_dir(scene, i, &center)).unzip();
    let c0: Vec<[f64; 3]> = (0..n).map(|i| sh::dc_color(scene.sh_of(i))).collect();

    let (corrected, mlp_out, mlp) = match appearance {
        Some(ctx) => {
            let net = ctx.net;
            let dim = net.correct_input_dim();
            let rows: Vec<f64> = (0..n)
                .into_par_iter()
                .flat_map_iter(|i| {
                    let gamma = fourier_features(&(scene.mu_of(i) / net.position_scale), net.fourier_bands);
                    correct_input_row(&c0[i], &ctx.e_view.0, &gamma)
                })
                .collect();
            let (out, cache) = net.correct_mlp.forward_batch(DMatrix::from_row_slice(n, dim, &rows));
            let corrected: Vec<[f64; 3]> = (0..n)
                .map(|i| {
                    let o: Vec<f64> = out.row(i).iter().copied().collect();
                    apply_affine(&c0[i], &o)
                })
                .collect();
            (corrected, Some(out), Some(cache))
        }
        None => (c0.clone(), None, None),
    };

    let unclamped: Vec<[f64; 3]> = (0..n)
        .into_par_iter()
        .map(|i| {
            let rest = sh_rest(scene.sh_of(i), &dirs[i], degree);
            [0, 1, 2].map(|c| corrected[i][c] + rest[c])
        })
        .collect();
    let colors = unclamped.iter().map(|c| c.map(|v| v.max(0.0))).collect();
    (colors, ColorCache { dirs, dists, c0, unclamped, mlp_out, mlp })
}

/// Backpropagates per-Gaussian color gradients into SH coefficients, centers
/// (through the view direction and Fourier features), the correction MLP and
/// the view embedding.
pub fn gaussian_colors_backward(
    scene: &Scene,
    appearance: Option<AppearanceCtx<'_>>,
    active_degree: usize,
    cache: &ColorCache,
    d_rgb: &[[f64; 3]],
) -> ColorGrads {
    let n = scene.len();
    let degree = active_degree.min(scene.sh_degree);
    let stride = scene.sh_stride();
    let count = sh::coeff_count(degree);

    // Per Gaussian: d(corrected c0), d sh (rest), d mu (direction path).
    let per: Vec<([f64; 3], Vec<f64>, Vector3<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let d_pre: [f64; 3] = [0, 1, 2].map(|c| if cache.unclamped[i][c] > 0.0 { d_rgb[i][c] } else { 0.0 });
            let mut d_sh = vec![0.0; stride];
            let mut d_mu = Vector3::zeros();
            if count > 1 && d_pre.iter().any(|v| *v != 0.0) {
                let dir = &cache.dirs[i];
                let b = sh::basis(dir, degree);
                let bg = sh::basis_grad(dir, degree);
                let coeffs = scene.sh_of(i);
                let mut d_dir = Vector3::zeros();
                for k in 1..count {
                    let mut s = 0.0;
                    for c in 0..3 {
                        d_sh[k * 3 + c] = b[k] * d_pre[c];
                        s += d_pre[c] * coeffs[k * 3 + c];
                    }
                    d_dir += Vector3::new(bg[k][0], bg[k][1], bg[k][2]) * s;
                }
                if cache.dists[i] > 0.0 {
                    d_mu = (d_dir - dir * dir.dot(&d_dir)) / cache.dists[i];
                }
            }
            (d_pre, d_sh, d_mu)
        })
        .collect();

    let mut grads = ColorGrads {
        sh: vec![0.0; n * stride],
        mu: vec![0.0; 3 * n],
        correct_mlp: vec![],
        e_view: vec![],
    };
    let mut d_c0: Vec<[f64; 3]> = Vec::with_capacity(n);
    for (i, (d_pre, d_sh, d_mu)) in per.iter().enumerate() {
        grads.sh[i * stride..(i + 1) * stride].copy_from_slice(d_sh);
        for a in 0..3 {
            grads.mu[3 * i + a] = d_mu[a];
        }
        d_c0.push(*d_pre);
    }

    if let (Some(ctx), Some(out), Some(mlp_cache)) = (appearance, &cache.mlp_out, &cache.mlp) {
        let net = ctx.net;
        let mut d_out = DMatrix::zeros(n, 6);
        for i in 0..n {
            for c in 0..3 {
                let g = d_c0[i][c];
                d_out[(i, c)] = g * cache.c0[i][c];
                d_out[(i, 3 + c)] = g;
                d_c0[i][c] = g * (1.0 + out[(i, c)]);
            }
        }
        let (d_params, d_in) = net.correct_mlp.backward_batch(mlp_cache, &d_out);
        grads.correct_mlp = d_params;
        let e = net.embed_dim;
        let mut d_e = vec![0.0; e];
        for i in 0..n {
            for c in 0..3 {
                d_c0[i][c] += d_in[(i, c)];
            }
            for j in 0..e {
                d_e[j] += d_in[(i, 3 + j)];
            }
        }
        grads.e_view = d_e;
        let gamma_mu: Vec<Vector3<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let d_gamma: Vec<f64> = (0..6 * net.fourier_bands).map(|j| d_in[(i, 3 + e + j)]).collect();
                fourier_features_backward(&(scene.mu_of(i) / net.position_scale), net.fourier_bands, &d_gamma)
                    / net.position_scale
            })
            .collect();
        for (i, g) in gamma_mu.iter().enumerate() {
            for a in 0..3 {
                grads.mu[3 * i + a] += g[a];
            }
        }
    }

    for (i, d) in d_c0.iter().enumerate() {
        for c in 0..3 {
            grads.sh[i * stride + c] += sh::SH_C0 * d[c];
        }
    }
    grads
}

/// Backpropagates `d e_view` into the pose MLP parameters.
pub fn encode_pose_backward(pose: &CameraPose, net: &AppearanceNet, d_e_view: &[f64]) -> Vec<f64> {
    let enc = pose_encoding(pose);
    let (_, cache) = net.pose_mlp.forward_batch(DMatrix::from_row_slice(1, 7, &enc));
    let d_out = DMatrix::from_row_slice(1, d_e_view.len(), d_e_view);
    net.pose_mlp.backward_batch(&cache, &d_out).0
}
