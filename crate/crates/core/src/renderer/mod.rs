//! Omnidirectional splatting of Gaussians onto an ERP panorama.
//!
//! Each pixel ray is intersected with every candidate splat in the splat's
//! local frame ([`raysplat`]); contributions are composited front to back in
//! per-view order of camera distance (ties broken by index) to give the clean
//! radiance `J`, the expected ray depth `D` and the coverage.

pub mod composite;
pub mod raysplat;
pub mod tiling;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::appearance::{self, AppearanceCtx};
use crate::erp::{self, ErpGrid, PixelCoord};
use crate::image::Image;
use crate::scene::{floored_scale, quat_to_rotation, sigmoid, CameraPose, Gaussian3D, Scene};

pub use composite::{composite, CompositeParams, Compositor, PixelResult, SplatContribution};
pub use raysplat::{RayHit, Rejected};
pub use tiling::{Footprint, TileGrid};

pub const DEFAULT_NEAR_CLIP: f64 = 1e-4;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RenderConfig {
    pub tile_size: usize,
    pub background: [f64; 3],
    pub d_max: f64,
    pub near_clip: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub transmittance_min: f64,
    /// Coverage below which the depth falls back to `d_max`.
    pub depth_coverage: f64,
    pub active_sh_degree: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            tile_size: 16,
            background: [0.0; 3],
            d_max: 10.0,
            near_clip: DEFAULT_NEAR_CLIP,
            alpha_min: 1.0 / 255.0,
            alpha_max: 0.999,
            transmittance_min: 1e-4,
            depth_coverage: 0.05,
            active_sh_degree: 3,
        }
    }
}

impl RenderConfig {
    pub fn composite_params(&self) -> CompositeParams {
        CompositeParams {
            alpha_min: self.alpha_min,
            alpha_max: self.alpha_max,
            transmittance_min: self.transmittance_min,
            depth_coverage: self.depth_coverage,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    /// Clean radiance `J`, 3 channels, not clamped.
    pub radiance: Image,
    /// Expected ray depth `D`, 1 channel.
    pub depth: Image,
    /// `1 − Π(1 − αᵢ)`, 1 channel.
    pub accum_alpha: Image,
}

/// A Gaussian expressed in one camera's frame, ready for ray evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedSplat {
    pub index: usize,
    /// `R_c R S` (camera-from-local linear part).
    pub a: Matrix3<f64>,
    /// Center in camera coordinates.
    pub b: Vector3<f64>,
    pub opacity: f64,
    pub rgb: [f64; 3],
    pub key: f64,
    pub max_scale: f64,
}

/// Effective per-axis scales and opacity multiplier under an isotropic
/// dilation `σ²I` of the covariance.
#[inline]
pub fn filtered_scales(log_scale: &Vector3<f64>, sigma: f64) -> (Vector3<f64>, f64) {
    let s = log_scale.map(|l| floored_scale(l).0);
    if sigma == 0.0 {
        return (s, 1.0);
    }
    let eff = s.map(|v| (v * v + sigma * sigma).sqrt());
    let ratio = (0..3).map(|k| s[k] / eff[k]).product();
    (eff, ratio)
}

pub fn project_gaussian(scene: &Scene, i: usize, pose: &CameraPose, rgb: [f64; 3], filter_sigma: f64) -> ProjectedSplat {
    let rc = pose.rotation();
    let (s, ratio) = filtered_scales(&scene.log_scale_of(i), filter_sigma);
    let a = rc * quat_to_rotation(&scene.quat_of(i)) * Matrix3::from_diagonal(&s);
    let b = rc * scene.mu_of(i) + pose.translation();
    ProjectedSplat {
        index: i,
        a,
        b,
        opacity: sigmoid(scene.raw_opacity[i]) * ratio,
        rgb,
        key: b.norm(),
        max_scale: s.max(),
    }
}

pub fn prepare_view(scene: &Scene, pose: &CameraPose, colors: &[[f64; 3]], filter: Option<&[f64]>) -> Vec<ProjectedSplat> {
    (0..scene.len())
        .into_par_iter()
        .map(|i| project_gaussian(scene, i, pose, colors[i], filter.map_or(0.0, |f| f[i])))
        .collect()
}

/// Positions into `splats` sorted by `(key, index)`.
pub fn sort_order(splats: &[ProjectedSplat]) -> Vec<u32> {
    let mut order: Vec<u32> = (0..splats.len() as u32).collect();
    order.sort_by(|&x, &y| {
        let (a, b) = (&splats[x as usize], &splats[y as usize]);
        a.key.total_cmp(&b.key).then(a.index.cmp(&b.index))
    });
    order
}

/// Evaluates a single Gaussian against the ray of pixel `p`.
pub fn ray_splat_eval(g: &Gaussian3D, pose: &CameraPose, p: PixelCoord) -> Result<RayHit, Rejected> {
    let rc = pose.rotation();
    let a = rc * g.rs();
    let b = rc * g.mu + pose.translation();
    let sd = erp::pixel_to_dir(p);
    raysplat::eval(&a, &b, &erp::ray_planes_for(&sd), &sd.dir, DEFAULT_NEAR_CLIP)
}

/// Per-tile Gaussian index lists for a view (indices into the scene).
pub fn cull_and_tile(scene: &Scene, pose: &CameraPose, cfg: &RenderConfig) -> Vec<Vec<usize>> {
    let colors = vec![[0.0; 3]; scene.len()];
    let splats = prepare_view(scene, pose, &colors, None);
    let order = sort_order(&splats);
    let grid = TileGrid::new(pose.width, pose.height, cfg.tile_size);
    tiling::assign_tiles(&splats, &order, &grid, cfg.alpha_min)
        .into_iter()
        .map(|l| l.into_iter().map(|k| splats[k as usize].index).collect())
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct Contrib {
    /// Position in the tile's list.
    pub local: u32,
    pub alpha: f64,
    pub rho_sq: f64,
    pub t: f64,
    pub t_before: f64,
    pub clamped: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct PixelTrace {
    pub start: u32,
    pub end: u32,
    pub transmittance: f64,
    pub depth_sum: f64,
    pub weight_sum: f64,
}

#[derive(Debug, Clone)]
pub struct TileTrace {
    pub list: Vec<u32>,
    pub contribs: Vec<Contrib>,
    /// Tile-local row-major pixels.
    pub pixels: Vec<PixelTrace>,
}

/// Forward record needed to backpropagate through compositing.
#[derive(Debug, Clone)]
pub struct RasterTrace {
    pub tiles: TileGrid,
    pub per_tile: Vec<TileTrace>,
}

struct TileOut {
    rgb: Vec<[f64; 3]>,
    depth: Vec<f64>,
    accum: Vec<f64>,
    trace: Option<TileTrace>,
}

fn raster_tile(
    splats: &[ProjectedSplat],
    list: Vec<u32>,
    rect: (usize, usize, usize, usize),
    grid: &ErpGrid,
    cfg: &RenderConfig,
    record: bool,
) -> TileOut {
    let (x0, x1, y0, y1) = rect;
    let n_px = (x1 - x0) * (y1 - y0);
    let p = cfg.composite_params();
    let mut out = TileOut {
        rgb: Vec::with_capacity(n_px),
        depth: Vec::with_capacity(n_px),
        accum: Vec::with_capacity(n_px),
        trace: None,
    };
    let mut contribs = Vec::new();
    let mut pixels = Vec::with_capacity(if record { n_px } else { 0 });
    let cones: Vec<tiling::Cone> = list.iter().map(|&k| tiling::cone(&splats[k as usize], p.alpha_min)).collect();
    for y in y0..y1 {
        for x in x0..x1 {
            let (dir, planes) = grid.ray(x, y);
            let mut comp = Compositor::new();
            let start = contribs.len() as u32;
            for (local, &k) in list.iter().enumerate() {
                if !cones[local].admits(dir) {
                    continue;
                }
                let s = &splats[k as usize];
                let Ok(hit) = raysplat::eval(&s.a, &s.b, planes, dir, cfg.near_clip) else { continue };
                let raw = s.opacity * (-0.5 * hit.rho_sq).exp();
                let Some((alpha, clamped)) = Compositor::gate(raw, &p) else { continue };
                let t_before = comp.push(alpha, hit.t, &s.rgb, &p);
                if record {
                    contribs.push(Contrib { local: local as u32, alpha, rho_sq: hit.rho_sq, t: hit.t, t_before, clamped });
                }
                if comp.done {
                    break;
                }
            }
            let r = comp.finish(&cfg.background, cfg.d_max, &p);
            out.rgb.push(r.rgb);
            out.depth.push(r.depth);
            out.accum.push(r.accum_alpha);
            if record {
                pixels.push(PixelTrace {
                    start,
                    end: contribs.len() as u32,
                    transmittance: comp.transmittance,
                    depth_sum: comp.depth_sum,
                    weight_sum: comp.weight_sum,
                });
            }
        }
    }
    if record {
        out.trace = Some(TileTrace { list, contribs, pixels });
    }
    out
}

/// Rasterizes prepared splats with the given per-tile lists.
pub fn rasterize(
    splats: &[ProjectedSplat],
    lists: Vec<Vec<u32>>,
    tiles: TileGrid,
    grid: &ErpGrid,
    cfg: &RenderConfig,
    record: bool,
) -> (RenderOutput, Option<RasterTrace>) {
    let (w, h) = (tiles.width, tiles.height);
    let outs: Vec<TileOut> = lists
        .into_par_iter()
        .enumerate()
        .map(|(t, list)| raster_tile(splats, list, tiles.rect(t), grid, cfg, record))
        .collect();
    let mut radiance = Image::new(w, h, 3);
    let mut depth = Image::new(w, h, 1);
    let mut accum = Image::new(w, h, 1);
    let mut per_tile = Vec::with_capacity(if record { outs.len() } else { 0 });
    for (t, o) in outs.into_iter().enumerate() {
        let (x0, x1, y0, y1) = tiles.rect(t);
        let mut k = 0;
        for y in y0..y1 {
            for x in x0..x1 {
                radiance.pixel_mut(x, y).copy_from_slice(&o.rgb[k]);
                depth.set(x, y, 0, o.depth[k]);
                accum.set(x, y, 0, o.accum[k]);
                k += 1;
            }
        }
        if let Some(tr) = o.trace {
            per_tile.push(tr);
        }
    }
    let out = RenderOutput { radiance, depth, accum_alpha: accum };
    (out, record.then_some(RasterTrace { tiles, per_tile }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RenderMode {
    Tiled,
    Naive,
}

/// Sorts, culls and rasterizes prepared splats.
pub fn render_splats(
    splats: &[ProjectedSplat],
    grid: &ErpGrid,
    cfg: &RenderConfig,
    mode: RenderMode,
    record: bool,
) -> (RenderOutput, Option<RasterTrace>) {
    let order = sort_order(splats);
    let (w, h) = (grid.width, grid.height);
    match mode {
        RenderMode::Tiled => {
            let tiles = TileGrid::new(w, h, cfg.tile_size);
            let lists = tiling::assign_tiles(splats, &order, &tiles, cfg.alpha_min);
            rasterize(splats, lists, tiles, grid, cfg, record)
        }
        RenderMode::Naive => {
            let tiles = TileGrid::whole(w, h);
            rasterize(splats, vec![order], tiles, grid, cfg, record)
        }
    }
}

pub fn render_filtered(
    scene: &Scene,
    pose: &CameraPose,
    appearance: Option<AppearanceCtx<'_>>,
    filter: Option<&[f64]>,
    cfg: &RenderConfig,
    mode: RenderMode,
) -> RenderOutput {
    let (colors, _) = appearance::gaussian_colors(scene, pose, appearance, cfg.active_sh_degree);
    let splats = prepare_view(scene, pose, &colors, filter);
    let grid = ErpGrid::new(pose.width, pose.height);
    render_splats(&splats, &grid, cfg, mode, false).0
}

/// Tiled renderer.
pub fn render(scene: &Scene, pose: &CameraPose, appearance: Option<AppearanceCtx<'_>>, cfg: &RenderConfig) -> RenderOutput {
    render_filtered(scene, pose, appearance, None, cfg, RenderMode::Tiled)
}

/// Reference renderer: every pixel visits every Gaussian.
pub fn render_naive(scene: &Scene, pose: &CameraPose, appearance: Option<AppearanceCtx<'_>>, cfg: &RenderConfig) -> RenderOutput {
    render_filtered(scene, pose, appearance, None, cfg, RenderMode::Naive)
}

/// Gradient of the loss with respect to one prepared splat.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplatGrad {
    pub d_a: Matrix3<f64>,
    pub d_b: Vector3<f64>,
    pub d_opacity: f64,
    pub d_rgb: [f64; 3],
    pub hit: bool,
}

impl Default for SplatGrad {
    fn default() -> Self {
        Self { d_a: Matrix3::zeros(), d_b: Vector3::zeros(), d_opacity: 0.0, d_rgb: [0.0; 3], hit: false }
    }
}

impl SplatGrad {
    fn add(&mut self, o: &SplatGrad) {
        self.d_a += o.d_a;
        self.d_b += o.d_b;
        self.d_opacity += o.d_opacity;
        for c in 0..3 {
            self.d_rgb[c] += o.d_rgb[c];
        }
        self.hit |= o.hit;
    }
}

/// Backpropagates per-pixel gradients of radiance and depth into the splats.
///
/// The depth fallback below coverage, the low-alpha discard and the alpha
/// clamp are treated as constant gates.
pub fn rasterize_backward(
    splats: &[ProjectedSplat],
    trace: &RasterTrace,
    grid: &ErpGrid,
    cfg: &RenderConfig,
    d_radiance: &Image,
    d_depth: &Image,
) -> Vec<SplatGrad> {
    let p = cfg.composite_params();
    let tiles = &trace.tiles;
    let locals: Vec<Vec<SplatGrad>> = trace
        .per_tile
        .par_iter()
        .enumerate()
        .map(|(t, tt)| {
            let mut local = vec![SplatGrad::default(); tt.list.len()];
            let (x0, x1, y0, y1) = tiles.rect(t);
            let mut k = 0;
            for y in y0..y1 {
                for x in x0..x1 {
                    let px = &tt.pixels[k];
                    k += 1;
                    let d_c = d_radiance.pixel(x, y);
                    let d_d = d_depth.get(x, y, 0);
                    let (d_num, d_den) = if 1.0 - px.transmittance >= p.depth_coverage && d_d != 0.0 {
                        if px.weight_sum > 1e-6 {
                            (d_d / px.weight_sum, -d_d * px.depth_sum / (px.weight_sum * px.weight_sum))
                        } else {
                            (d_d / 1e-6, 0.0)
                        }
                    } else {
                        (0.0, 0.0)
                    };
                    let (dir, planes) = grid.ray(x, y);
                    let mut suffix = px.transmittance
                        * (d_c[0] * cfg.background[0] + d_c[1] * cfg.background[1] + d_c[2] * cfg.background[2]);
                    for c in tt.contribs[px.start as usize..px.end as usize].iter().rev() {
                        let s = &splats[tt.list[c.local as usize] as usize];
                        let g = d_c[0] * s.rgb[0] + d_c[1] * s.rgb[1] + d_c[2] * s.rgb[2] + d_num * c.t + d_den;
                        let w = c.alpha * c.t_before;
                        let d_alpha = c.t_before * g - suffix / (1.0 - c.alpha);
                        suffix += w * g;
                        let lg = &mut local[c.local as usize];
                        lg.hit = true;
                        for ch in 0..3 {
                            lg.d_rgb[ch] += w * d_c[ch];
                        }
                        let d_t = d_num * w;
                        let d_rho = if c.clamped {
                            0.0
                        } else {
                            lg.d_opacity += d_alpha * (-0.5 * c.rho_sq).exp();
                            -0.5 * d_alpha * c.alpha
                        };
                        if d_rho != 0.0 || d_t != 0.0 {
                            let (da, db) = raysplat::eval_backward(&s.a, &s.b, planes, dir, d_rho, d_t);
                            lg.d_a += da;
                            lg.d_b += db;
                        }
                    }
                }
            }
            local
        })
        .collect();
    let mut grads = vec![SplatGrad::default(); splats.len()];
    for (tt, local) in trace.per_tile.iter().zip(&locals) {
        for (k, g) in tt.list.iter().zip(local) {
            grads[*k as usize].add(g);
        }
    }
    grads
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Gaussian3D;

    fn unit_gaussian(mu: Vector3<f64>) -> Gaussian3D {
        Gaussian3D { mu, quat: [1.0, 0.0, 0.0, 0.0], log_scale: Vector3::zeros(), raw_opacity: 0.0, sh: vec![0.0; 3] }
    }

    #[test]
    fn ray_through_center() {
        let pose = CameraPose::new(Matrix3::identity(), Vector3::zeros(), 64, 32, 0);
        let g = unit_gaussian(Vector3::new(0.0, 0.0, -5.0));
        let hit = ray_splat_eval(&g, &pose, PixelCoord::new(31.5, 15.5, 64, 32)).unwrap();
        assert!(hit.rho_sq.abs() < 1e-20);
        assert!((hit.t - 5.0).abs() < 1e-12);
    }

    #[test]
    fn ray_at_unit_perpendicular_distance() {
        let pose = CameraPose::new(Matrix3::identity(), Vector3::zeros(), 64, 32, 0);
        let p = PixelCoord::new(36.0, 15.5, 64, 32);
        let d = erp::pixel_to_dir(p).dir;
        // Place μ at unit distance from the ray, perpendicular within the horizontal plane.
        let foot = d * 5.0;
        let perp = Vector3::new(-d.z, 0.0, d.x).normalize();
        let g = unit_gaussian(foot + perp);
        let hit = ray_splat_eval(&g, &pose, p).unwrap();
        assert!((hit.rho_sq - 1.0).abs() < 1e-12);
        assert!((hit.t - 5.0).abs() < 1e-12);
    }

    #[test]
    fn behind_camera_is_rejected() {
        let pose = CameraPose::new(Matrix3::identity(), Vector3::zeros(), 64, 32, 0);
        let g = unit_gaussian(Vector3::new(0.0, 0.0, 5.0));
        assert_eq!(ray_splat_eval(&g, &pose, PixelCoord::new(31.5, 15.5, 64, 32)), Err(Rejected::BehindCamera));
    }

    #[test]
    fn centered_gaussian_goes_to_every_tile() {
        let mut g = unit_gaussian(Vector3::new(0.0, 0.0, 0.0));
        g.log_scale = Vector3::repeat(-3.0);
        let scene = Scene::from_gaussians(0, &[g]);
        let pose = CameraPose::new(Matrix3::identity(), Vector3::zeros(), 64, 32, 0);
        let lists = cull_and_tile(&scene, &pose, &RenderConfig::default());
        assert_eq!(lists.len(), 8);
        assert!(lists.iter().all(|l| l == &vec![0]));
    }

    #[test]
    fn seam_gaussian_reaches_both_borders() {
        let mut g = unit_gaussian(Vector3::new(1e-3, 0.0, 5.0));
        g.log_scale = Vector3::repeat(-2.0);
        g.raw_opacity = 3.0;
        let scene = Scene::from_gaussians(0, &[g]);
        let pose = CameraPose::new(Matrix3::identity(), Vector3::zeros(), 64, 32, 0);
        let lists = cull_and_tile(&scene, &pose, &RenderConfig::default());
        let grid = TileGrid::new(64, 32, 16);
        let hit_cols: Vec<usize> = (0..grid.len()).filter(|t| !lists[*t].is_empty()).map(|t| t % grid.tiles_x).collect();
        assert!(hit_cols.contains(&0) && hit_cols.contains(&(grid.tiles_x - 1)), "{hit_cols:?}");
        assert!(!hit_cols.contains(&1));
    }

    #[test]
    fn empty_scene_renders_background() {
        let scene = Scene::empty(0);
        let pose = CameraPose::new(Matrix3::identity(), Vector3::zeros(), 16, 8, 0);
        let cfg = RenderConfig { background: [0.1, 0.2, 0.3], d_max: 4.0, ..Default::default() };
        let out = render(&scene, &pose, None, &cfg);
        for y in 0..8 {
            for x in 0..16 {
                assert_eq!(out.radiance.pixel(x, y), &[0.1, 0.2, 0.3]);
                assert_eq!(out.depth.get(x, y, 0), 4.0);
                assert_eq!(out.accum_alpha.get(x, y, 0), 0.0);
            }
        }
    }
}
