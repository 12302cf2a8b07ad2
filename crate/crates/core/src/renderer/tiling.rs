//! Conservative assignment of splats to screen tiles on the ERP grid.
//!
//! A splat can only reach `α ≥ alpha_min` where `ρ² ≤ 2 ln(o / alpha_min)`,
//! which lies inside a world ball of radius `ρ_max · max_scale` around its
//! center. Seen from the camera that ball subtends the angular radius
//! `ψ = asin(r / dist)`, and a spherical cap of radius `ψ` around latitude
//! `θ_c` spans at most `asin(sin ψ / cos θ_c)` in longitude (or every
//! longitude when it touches a pole).

use std::f64::consts::{PI, TAU};

use nalgebra::Vector3;

use super::ProjectedSplat;
use crate::erp::{dir_to_angles, HALF_PI};

/// Row/column margin in pixels added around every footprint.
const PIXEL_MARGIN: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileGrid {
    pub width: usize,
    pub height: usize,
    pub tile_w: usize,
    pub tile_h: usize,
    pub tiles_x: usize,
    pub tiles_y: usize,
}

impl TileGrid {
    pub fn new(width: usize, height: usize, tile_size: usize) -> Self {
        Self::with_tile(width, height, tile_size, tile_size)
    }

    pub fn with_tile(width: usize, height: usize, tile_w: usize, tile_h: usize) -> Self {
        assert!(tile_w > 0 && tile_h > 0);
        Self { width, height, tile_w, tile_h, tiles_x: width.div_ceil(tile_w), tiles_y: height.div_ceil(tile_h) }
    }

    /// A single tile covering the whole image.
    pub fn whole(width: usize, height: usize) -> Self {
        Self::with_tile(width, height, width.max(1), height.max(1))
    }

    pub fn len(&self) -> usize {
        self.tiles_x * self.tiles_y
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(x0, x1, y0, y1)`, half-open.
    pub fn rect(&self, tile: usize) -> (usize, usize, usize, usize) {
        let (tx, ty) = (tile % self.tiles_x, tile / self.tiles_x);
        let x0 = tx * self.tile_w;
        let y0 = ty * self.tile_h;
        (x0, (x0 + self.tile_w).min(self.width), y0, (y0 + self.tile_h).min(self.height))
    }
}

/// Pixel region a splat may touch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Footprint {
    Invisible,
    Everywhere,
    /// Inclusive row range and one or two inclusive column ranges.
    Region { rows: (usize, usize), cols: Vec<(usize, usize)> },
}

/// Bounding cone of the region where a splat can pass the alpha gate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Cone {
    Invisible,
    /// The camera is inside the bounding ball.
    Everywhere,
    Around { axis: Vector3<f64>, cos_half_angle: f64, half_angle: f64 },
}

impl Cone {
    /// Whether the unit ray direction `d` may see the splat.
    #[inline]
    pub fn admits(&self, d: &Vector3<f64>) -> bool {
        match self {
            Cone::Invisible => false,
            Cone::Everywhere => true,
            Cone::Around { axis, cos_half_angle, .. } => axis.dot(d) >= cos_half_angle - 1e-12,
        }
    }
}

pub fn cone(s: &ProjectedSplat, alpha_min: f64) -> Cone {
    if !(s.opacity >= alpha_min) {
        return Cone::Invisible;
    }
    let rho_max = (2.0 * (s.opacity / alpha_min).ln()).max(0.0).sqrt() * 1.001 + 1e-6;
    let radius = rho_max * s.max_scale;
    let dist = s.b.norm();
    if dist <= radius * 1.001 {
        return Cone::Everywhere;
    }
    let sin = radius / dist;
    Cone::Around { axis: s.b / dist, cos_half_angle: (1.0 - sin * sin).sqrt(), half_angle: sin.asin() }
}

pub fn footprint(s: &ProjectedSplat, width: usize, height: usize, alpha_min: f64) -> Footprint {
    let psi = match cone(s, alpha_min) {
        Cone::Invisible => return Footprint::Invisible,
        Cone::Everywhere => return Footprint::Everywhere,
        Cone::Around { half_angle, .. } => half_angle,
    };
    let dist = s.b.norm();
    let (w, h) = (width as f64, height as f64);
    let (phi_c, theta_c) = dir_to_angles(&(s.b / dist));

    let to_py = |theta: f64| (theta / PI + 0.5) * h - 0.5;
    let lo = (to_py(theta_c - psi) - PIXEL_MARGIN).ceil().max(0.0);
    let hi = (to_py(theta_c + psi) + PIXEL_MARGIN).floor().min(h - 1.0);
    if lo > hi {
        return Footprint::Invisible;
    }
    let rows = (lo as usize, hi as usize);
    let full = vec![(0, width - 1)];

    if theta_c + psi >= HALF_PI || theta_c - psi <= -HALF_PI {
        return Footprint::Region { rows, cols: full };
    }
    let ratio = psi.sin() / theta_c.cos();
    if ratio >= 1.0 {
        return Footprint::Region { rows, cols: full };
    }
    let dphi = ratio.asin();
    let px_c = (phi_c / TAU + 0.5) * w - 0.5;
    let half = dphi * w / TAU + PIXEL_MARGIN;
    let x_lo = (px_c - half).ceil() as i64;
    let x_hi = (px_c + half).floor() as i64;
    if x_hi - x_lo + 1 >= width as i64 {
        return Footprint::Region { rows, cols: full };
    }
    let wi = width as i64;
    let (a, b) = (x_lo.rem_euclid(wi), x_hi.rem_euclid(wi));
    let cols = if a <= b { vec![(a as usize, b as usize)] } else { vec![(a as usize, width - 1), (0, b as usize)] };
    Footprint::Region { rows, cols }
}

/// Per-tile lists of positions into `splats`, each list in `order`.
pub fn assign_tiles(splats: &[ProjectedSplat], order: &[u32], grid: &TileGrid, alpha_min: f64) -> Vec<Vec<u32>> {
    let mut lists = vec![Vec::new(); grid.len()];
    for &k in order {
        match footprint(&splats[k as usize], grid.width, grid.height, alpha_min) {
            Footprint::Invisible => {}
            Footprint::Everywhere => lists.iter_mut().for_each(|l| l.push(k)),
            Footprint::Region { rows, cols } => {
                let (ty0, ty1) = (rows.0 / grid.tile_h, rows.1 / grid.tile_h);
                for (c0, c1) in cols {
                    let (tx0, tx1) = (c0 / grid.tile_w, c1 / grid.tile_w);
                    for ty in ty0..=ty1 {
                        for tx in tx0..=tx1 {
                            lists[ty * grid.tiles_x + tx].push(k);
                        }
                    }
                }
            }
        }
    }
    lists
}
