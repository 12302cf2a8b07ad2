//! Reverse-mode gradients of the full pipeline
//! (scene → render → appearance → medium → loss) and finite-difference checks.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::appearance::{self, AppearanceCtx, AppearanceNet, ViewEmbedding};
use crate::erp::ErpGrid;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::medium::{self, Medium, MediumMaps};
use crate::optim::loss::{self, LossConfig};
use crate::renderer::{self, raysplat, RenderConfig, RenderMode, RenderOutput};
use crate::scene::{floored_scale, quat_to_rotation, quat_to_rotation_backward, sigmoid, CameraPose, Scene};

/// Parameter groups, in the canonical order used by gradients, optimizer
/// state and checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GroupId {
    Mu,
    Quat,
    LogScale,
    RawOpacity,
    Sh,
    PoseMlp,
    CorrectMlp,
    Backscatter,
    Attenuation,
}

pub const GROUP_COUNT: usize = 9;

impl GroupId {
    pub const ALL: [GroupId; GROUP_COUNT] = [
        GroupId::Mu,
        GroupId::Quat,
        GroupId::LogScale,
        GroupId::RawOpacity,
        GroupId::Sh,
        GroupId::PoseMlp,
        GroupId::CorrectMlp,
        GroupId::Backscatter,
        GroupId::Attenuation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GroupId::Mu => "gaussian.mu",
            GroupId::Quat => "gaussian.quat",
            GroupId::LogScale => "gaussian.log_scale",
            GroupId::RawOpacity => "gaussian.raw_opacity",
            GroupId::Sh => "gaussian.sh",
            GroupId::PoseMlp => "appearance.pose_mlp",
            GroupId::CorrectMlp => "appearance.correct_mlp",
            GroupId::Backscatter => "medium.backscatter",
            GroupId::Attenuation => "medium.attenuation",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Groups with one block of values per Gaussian.
    pub fn is_per_gaussian(self) -> bool {
        self.index() <= GroupId::Sh.index()
    }
}

/// All learnable state.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub scene: Scene,
    pub appearance: AppearanceNet,
    pub medium: Medium,
}

impl Model {
    pub fn group(&self, g: GroupId) -> Vec<f64> {
        match g {
            GroupId::Mu => self.scene.mu.clone(),
            GroupId::Quat => self.scene.quat.clone(),
            GroupId::LogScale => self.scene.log_scale.clone(),
            GroupId::RawOpacity => self.scene.raw_opacity.clone(),
            GroupId::Sh => self.scene.sh.clone(),
            GroupId::PoseMlp => self.appearance.pose_mlp.params.clone(),
            GroupId::CorrectMlp => self.appearance.correct_mlp.params.clone(),
            GroupId::Backscatter => self.medium.backscatter.to_flat(),
            GroupId::Attenuation => self.medium.attenuation.to_flat(),
        }
    }

    pub fn group_len(&self, g: GroupId) -> usize {
        match g {
            GroupId::Mu => self.scene.mu.len(),
            GroupId::Quat => self.scene.quat.len(),
            GroupId::LogScale => self.scene.log_scale.len(),
            GroupId::RawOpacity => self.scene.raw_opacity.len(),
            GroupId::Sh => self.scene.sh.len(),
            GroupId::PoseMlp => self.appearance.pose_mlp.params.len(),
            GroupId::CorrectMlp => self.appearance.correct_mlp.params.len(),
            GroupId::Backscatter => medium::BACKSCATTER_PARAM_COUNT,
            GroupId::Attenuation => self.medium.attenuation.wa.len() + 2 * self.medium.attenuation.candidates,
        }
    }

    pub fn set_group(&mut self, g: GroupId, v: &[f64]) {
        assert_eq!(v.len(), self.group_len(g), "{}", g.name());
        match g {
            GroupId::Mu => self.scene.mu.copy_from_slice(v),
            GroupId::Quat => self.scene.quat.copy_from_slice(v),
            GroupId::LogScale => self.scene.log_scale.copy_from_slice(v),
            GroupId::RawOpacity => self.scene.raw_opacity.copy_from_slice(v),
            GroupId::Sh => self.scene.sh.copy_from_slice(v),
            GroupId::PoseMlp => self.appearance.pose_mlp.params.copy_from_slice(v),
            GroupId::CorrectMlp => self.appearance.correct_mlp.params.copy_from_slice(v),
            GroupId::Backscatter => self.medium.backscatter = medium::BackscatterParams::from_flat(v),
            GroupId::Attenuation => self.medium.attenuation.set_flat(v),
        }
    }

    /// Mutable access to groups stored contiguously.
    pub fn group_slice_mut(&mut self, g: GroupId) -> Option<&mut [f64]> {
        match g {
            GroupId::Mu => Some(&mut self.scene.mu),
            GroupId::Quat => Some(&mut self.scene.quat),
            GroupId::LogScale => Some(&mut self.scene.log_scale),
            GroupId::RawOpacity => Some(&mut self.scene.raw_opacity),
            GroupId::Sh => Some(&mut self.scene.sh),
            GroupId::PoseMlp => Some(&mut self.appearance.pose_mlp.params),
            GroupId::CorrectMlp => Some(&mut self.appearance.correct_mlp.params),
            GroupId::Backscatter | GroupId::Attenuation => None,
        }
    }

    pub fn param_count(&self) -> usize {
        GroupId::ALL.iter().map(|g| self.group_len(*g)).sum()
    }

    /// Rounds every parameter to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for g in GroupId::ALL {
            let v: Vec<f64> = self.group(g).iter().map(|x| *x as f32 as f64).collect();
            self.set_group(g, &v);
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct PipelineConfig {
    pub render: RenderConfig,
    pub loss: LossConfig,
    pub use_appearance: bool,
    pub use_medium: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self { render: RenderConfig::default(), loss: LossConfig::default(), use_appearance: true, use_medium: true }
    }
}

/// One observed view.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub pose: CameraPose,
    pub image: Image,
}

/// Everything the forward pass produces for one view.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewForward {
    pub render: RenderOutput,
    pub e_view: ViewEmbedding,
    pub maps: Option<MediumMaps>,
    /// Composed observation `Î` (equal to `J` without the medium).
    pub composed: Image,
}

pub fn view_embedding(model: &Model, pose: &CameraPose, cfg: &PipelineConfig) -> ViewEmbedding {
    if cfg.use_appearance {
        appearance::encode_pose(pose, &model.appearance)
    } else {
        ViewEmbedding(vec![0.0; model.appearance.embed_dim])
    }
}

fn appearance_ctx<'a>(model: &'a Model, e: &'a ViewEmbedding, cfg: &PipelineConfig) -> Option<AppearanceCtx<'a>> {
    cfg.use_appearance.then_some(AppearanceCtx { net: &model.appearance, e_view: e })
}

pub fn forward_view(model: &Model, pose: &CameraPose, filter: Option<&[f64]>, cfg: &PipelineConfig) -> ViewForward {
    let e = view_embedding(model, pose, cfg);
    let render = renderer::render_filtered(
        &model.scene,
        pose,
        appearance_ctx(model, &e, cfg),
        filter,
        &cfg.render,
        RenderMode::Tiled,
    );
    finish_forward(model, render, e, cfg)
}

fn finish_forward(model: &Model, render: RenderOutput, e: ViewEmbedding, cfg: &PipelineConfig) -> ViewForward {
    if cfg.use_medium {
        let maps = medium::medium_maps(&render.depth, &e.0, &model.medium);
        let composed = medium::compose_uifm(&render.radiance, &maps.a, &maps.b).expect("same shape");
        ViewForward { render, e_view: e, maps: Some(maps), composed }
    } else {
        let composed = render.radiance.clone();
        ViewForward { render, e_view: e, maps: None, composed }
    }
}

/// Summed loss over views.
pub fn forward_loss(model: &Model, views: &[View], filter: Option<&[f64]>, cfg: &PipelineConfig) -> Result<f64> {
    if views.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for v in views {
        let f = forward_view(model, &v.pose, filter, cfg);
        total += loss::loss(&f.composed, &v.image, &cfg.loss)?;
    }
    Ok(total)
}

/// Per-group gradients plus per-Gaussian screen-space statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub groups: Vec<Vec<f64>>,
    /// Sum over views of the norm of `dL/d(projected center)` in normalized
    /// image coordinates.
    pub screen_grad: Vec<f64>,
    /// Number of views in which each Gaussian contributed to some pixel.
    pub visible: Vec<u32>,
}

impl Gradients {
    pub fn zeros(model: &Model) -> Self {
        let n = model.scene.len();
        Self {
            groups: GroupId::ALL.iter().map(|g| vec![0.0; model.group_len(*g)]).collect(),
            screen_grad: vec![0.0; n],
            visible: vec![0; n],
        }
    }

    pub fn group(&self, g: GroupId) -> &[f64] {
        &self.groups[g.index()]
    }

    pub fn add(&mut self, o: &Gradients) {
        for (a, b) in self.groups.iter_mut().zip(&o.groups) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (a, b) in self.screen_grad.iter_mut().zip(&o.screen_grad) {
            *a += b;
        }
        for (a, b) in self.visible.iter_mut().zip(&o.visible) {
            *a += b;
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        for g in GroupId::ALL {
            if let Some(index) = self.group(g).iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient { group: g.name(), index });
            }
        }
        Ok(())
    }
}

/// Gradient of the projected ERP center in normalized image coordinates
/// (`[-1, 1]` across the width and height) given `dL/db` in camera space.
fn screen_gradient(b: &Vector3<f64>, d_b: &Vector3<f64>) -> f64 {
    let dist = b.norm();
    if dist == 0.0 {
        return 0.0;
    }
    let (phi, theta) = crate::erp::dir_to_angles(&(b / dist));
    let (sp, cp) = phi.sin_cos();
    let (st, ct) = theta.sin_cos();
    // db/dφ and db/dθ at fixed distance.
    let db_dphi = Vector3::new(cp * ct, 0.0, sp * ct) * dist;
    let db_dtheta = Vector3::new(-sp * st, ct, cp * st) * dist;
    // φ spans 2π over [-1, 1], θ spans π.
    let gx = d_b.dot(&db_dphi) * std::f64::consts::PI;
    let gy = d_b.dot(&db_dtheta) * std::f64::consts::FRAC_PI_2;
    (gx * gx + gy * gy).sqrt()
}

/// Loss of one view and its gradient with respect to every parameter.
pub fn backward_view(model: &Model, view: &View, filter: Option<&[f64]>, cfg: &PipelineConfig) -> Result<(f64, Gradients, ViewForward)> {
    let scene = &model.scene;
    let pose = &view.pose;
    let n = scene.len();
    let e = view_embedding(model, pose, cfg);
    let ctx = appearance_ctx(model, &e, cfg);
    let active = cfg.render.active_sh_degree;

    let (colors, color_cache) = appearance::gaussian_colors(scene, pose, ctx, active);
    let splats = renderer::prepare_view(scene, pose, &colors, filter);
    let grid = ErpGrid::new(pose.width, pose.height);
    let (render, trace) = renderer::render_splats(&splats, &grid, &cfg.render, RenderMode::Tiled, true);
    let trace = trace.expect("recorded");
    let fwd = finish_forward(model, render, e.clone(), cfg);
    let (value, d_i) = loss::loss_with_grad(&fwd.composed, &view.image, &cfg.loss)?;

    let mut grads = Gradients::zeros(model);
    let (d_j, d_depth, mut d_e) = if cfg.use_medium {
        let mg = medium::compose_backward(&fwd.render.depth, &e.0, &fwd.render.radiance, &model.medium, &d_i);
        grads.groups[GroupId::Backscatter.index()] = mg.backscatter;
        grads.groups[GroupId::Attenuation.index()] = mg.attenuation;
        (mg.d_j, mg.d_depth, mg.d_e_view)
    } else {
        (d_i, Image::new(pose.width, pose.height, 1), vec![0.0; model.appearance.embed_dim])
    };

    let sg = renderer::rasterize_backward(&splats, &trace, &grid, &cfg.render, &d_j, &d_depth);

    let d_rgb: Vec<[f64; 3]> = sg.iter().map(|g| g.d_rgb).collect();
    let cg = appearance::gaussian_colors_backward(scene, ctx, active, &color_cache, &d_rgb);
    grads.groups[GroupId::Sh.index()] = cg.sh;
    if cfg.use_appearance {
        grads.groups[GroupId::CorrectMlp.index()] = cg.correct_mlp;
        for (a, b) in d_e.iter_mut().zip(&cg.e_view) {
            *a += b;
        }
        grads.groups[GroupId::PoseMlp.index()] = appearance::encode_pose_backward(pose, &model.appearance, &d_e);
    }

    let rc = pose.rotation();
    let rct = rc.transpose();
    let per: Vec<GeomGrad> = (0..n)
        .into_par_iter()
        .map(|i| geometry_backward(scene, i, &rct, &splats[i], &sg[i], filter.map_or(0.0, |f| f[i])))
        .collect();
    for (i, p) in per.iter().enumerate() {
        for a in 0..3 {
            grads.groups[GroupId::Mu.index()][3 * i + a] = p.mu[a] + cg.mu[3 * i + a];
            grads.groups[GroupId::LogScale.index()][3 * i + a] = p.log_scale[a];
        }
        grads.groups[GroupId::Quat.index()][4 * i..4 * i + 4].copy_from_slice(&p.quat);
        grads.groups[GroupId::RawOpacity.index()][i] = p.raw_opacity;
        if sg[i].hit {
            grads.visible[i] = 1;
            grads.screen_grad[i] = screen_gradient(&splats[i].b, &sg[i].d_b);
        }
    }
    grads.check_finite()?;
    Ok((value, grads, fwd))
}

struct GeomGrad {
    mu: Vector3<f64>,
    quat: [f64; 4],
    log_scale: Vector3<f64>,
    raw_opacity: f64,
}

fn geometry_backward(
    scene: &Scene,
    i: usize,
    rct: &Matrix3<f64>,
    splat: &renderer::ProjectedSplat,
    g: &renderer::SplatGrad,
    sigma: f64,
) -> GeomGrad {
    if !g.hit {
        return GeomGrad { mu: Vector3::zeros(), quat: [0.0; 4], log_scale: Vector3::zeros(), raw_opacity: 0.0 };
    }
    let q = scene.quat_of(i);
    let r = quat_to_rotation(&q);
    let ls = scene.log_scale_of(i);
    let (s, ds_dlog): (Vec<f64>, Vec<f64>) = (0..3).map(|k| floored_scale(ls[k])).unzip();
    let s_eff: Vec<f64> = s.iter().map(|v| (v * v + sigma * sigma).sqrt()).collect();
    let ratio: f64 = (0..3).map(|k| s[k] / s_eff[k]).product();
    let base = sigmoid(scene.raw_opacity[i]);
    debug_assert!((base * ratio - splat.opacity).abs() <= 1e-12 * splat.opacity.max(1.0));

    let mu = rct * g.d_b;
    let m_w = rct * g.d_a;
    let mut d_r = Matrix3::zeros();
    let mut d_s_eff = [0.0; 3];
    for j in 0..3 {
        for row in 0..3 {
            d_r[(row, j)] = m_w[(row, j)] * s_eff[j];
            d_s_eff[j] += m_w[(row, j)] * r[(row, j)];
        }
    }
    let d_ratio = g.d_opacity * base;
    let raw_opacity = g.d_opacity * ratio * base * (1.0 - base);
    let mut log_scale = Vector3::zeros();
    for j in 0..3 {
        let mut d_s = d_s_eff[j] * s[j] / s_eff[j];
        if sigma != 0.0 {
            d_s += d_ratio * ratio * (1.0 / s[j] - s[j] / (s_eff[j] * s_eff[j]));
        }
        log_scale[j] = d_s * ds_dlog[j];
    }
    GeomGrad { mu, quat: quat_to_rotation_backward(&q, &d_r), log_scale, raw_opacity }
}

/// Summed loss and gradients over several views.
pub fn backward(model: &Model, views: &[View], filter: Option<&[f64]>, cfg: &PipelineConfig) -> Result<(f64, Gradients)> {
    if views.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    let mut grads = Gradients::zeros(model);
    for v in views {
        let (l, g, _) = backward_view(model, v, filter, cfg)?;
        total += l;
        grads.add(&g);
    }
    Ok((total, grads))
}

/// Distances of the current instance from the non-differentiable gates, each
/// relative to the gate's scale. Finite differences are only meaningful
/// when all margins comfortably exceed the probe step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateMargins {
    /// Raw alphas vs. the discard threshold and the clamp.
    pub alpha: f64,
    /// Final transmittance vs. the early-termination threshold.
    pub transmittance: f64,
    /// Coverage vs. the depth-fallback threshold.
    pub coverage: f64,
    /// Unclamped colors vs. zero.
    pub color: f64,
    /// MLP hidden pre-activations vs. zero.
    pub relu: f64,
    /// Smallest gap between consecutive sort keys.
    pub order: f64,
    /// Smallest `|Î − I|`.
    pub residual: f64,
}

impl GateMargins {
    pub fn min(&self) -> f64 {
        [self.alpha, self.transmittance, self.coverage, self.color, self.relu, self.order, self.residual]
            .into_iter()
            .fold(f64::INFINITY, f64::min)
    }
}

/// Exhaustive gate scan, intended for small instances.
pub fn gate_margins(model: &Model, views: &[View], filter: Option<&[f64]>, cfg: &PipelineConfig) -> GateMargins {
    let rc = &cfg.render;
    let p = rc.composite_params();
    let mut m = GateMargins {
        alpha: f64::INFINITY,
        transmittance: f64::INFINITY,
        coverage: f64::INFINITY,
        color: f64::INFINITY,
        relu: f64::INFINITY,
        order: f64::INFINITY,
        residual: f64::INFINITY,
    };
    let scene = &model.scene;
    for v in views {
        let pose = &v.pose;
        let e = view_embedding(model, pose, cfg);
        let ctx = appearance_ctx(model, &e, cfg);
        let (colors, cache) = appearance::gaussian_colors(scene, pose, ctx, rc.active_sh_degree);
        for u in &cache.unclamped {
            for c in u {
                m.color = m.color.min(c.abs());
            }
        }
        if let Some(mc) = &cache.mlp {
            m.relu = m.relu.min(mc.pre.iter().fold(f64::INFINITY, |a, b| a.min(b.abs())));
        }
        if cfg.use_appearance {
            let enc = appearance::pose_encoding(pose);
            let (_, pc) = model.appearance.pose_mlp.forward_batch(nalgebra::DMatrix::from_row_slice(1, 7, &enc));
            m.relu = m.relu.min(pc.pre.iter().fold(f64::INFINITY, |a, b| a.min(b.abs())));
        }
        let splats = renderer::prepare_view(scene, pose, &colors, filter);
        let order = renderer::sort_order(&splats);
        for w in order.windows(2) {
            let gap = splats[w[1] as usize].key - splats[w[0] as usize].key;
            m.order = m.order.min(gap);
        }
        let grid = ErpGrid::new(pose.width, pose.height);
        for y in 0..pose.height {
            for x in 0..pose.width {
                let (dir, planes) = grid.ray(x, y);
                let mut t = 1.0;
                for &k in &order {
                    let s = &splats[k as usize];
                    let Ok(hit) = raysplat::eval(&s.a, &s.b, planes, dir, rc.near_clip) else { continue };
                    let raw = s.opacity * (-0.5 * hit.rho_sq).exp();
                    m.alpha = m.alpha.min(((raw - p.alpha_min) / p.alpha_min).abs());
                    m.alpha = m.alpha.min(((raw - p.alpha_max) / p.alpha_max).abs());
                    if raw >= p.alpha_min {
                        t *= 1.0 - raw.min(p.alpha_max);
                    }
                }
                m.transmittance = m.transmittance.min(((t - p.transmittance_min) / p.transmittance_min).abs());
                m.coverage = m.coverage.min(((1.0 - t) - p.depth_coverage).abs() / p.depth_coverage);
            }
        }
        let f = forward_view(model, pose, filter, cfg);
        for (a, b) in f.composed.data.iter().zip(&v.image.data) {
            m.residual = m.residual.min((a - b).abs());
        }
    }
    m
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GroupCheck {
    pub group: String,
    pub count: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub failing: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GradCheckReport {
    pub eps: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub groups: Vec<GroupCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.failing.is_empty())
    }
}

/// Compares analytic gradients against central differences for every scalar.
///
/// An entry passes when its relative error is within `rel_tol`, or, for
/// analytic gradients smaller than `1e-5` in magnitude, when the absolute
/// error is within `abs_tol`.
pub fn grad_check(
    model: &Model,
    views: &[View],
    filter: Option<&[f64]>,
    cfg: &PipelineConfig,
    eps: f64,
    rel_tol: f64,
    abs_tol: f64,
) -> Result<GradCheckReport> {
    let (_, grads) = backward(model, views, filter, cfg)?;
    let mut groups = Vec::with_capacity(GROUP_COUNT);
    for g in GroupId::ALL {
        let base = model.group(g);
        let analytic = grads.group(g);
        let results: Vec<Result<(f64, f64)>> = (0..base.len())
            .into_par_iter()
            .map(|k| {
                let mut plus = model.clone();
                let mut v = base.clone();
                v[k] = base[k] + eps;
                plus.set_group(g, &v);
                let mut minus = model.clone();
                v[k] = base[k] - eps;
                minus.set_group(g, &v);
                let fd = (forward_loss(&plus, views, filter, cfg)? - forward_loss(&minus, views, filter, cfg)?) / (2.0 * eps);
                let abs = (fd - analytic[k]).abs();
                let rel = abs / fd.abs().max(analytic[k].abs()).max(1e-300);
                Ok((abs, rel))
            })
            .collect();
        let mut check = GroupCheck { group: g.name().to_string(), count: base.len(), max_rel_error: 0.0, max_abs_error: 0.0, failing: vec![] };
        for (k, r) in results.into_iter().enumerate() {
            let (abs, rel) = r?;
            let small = analytic[k].abs() < 1e-5;
            let ok = rel <= rel_tol || (small && abs <= abs_tol);
            if !small {
                check.max_rel_error = check.max_rel_error.max(rel);
            }
            check.max_abs_error = check.max_abs_error.max(abs);
            if !ok {
                check.failing.push(k);
            }
        }
        groups.push(check);
    }
    Ok(GradCheckReport { eps, rel_tol, abs_tol, groups })
}
