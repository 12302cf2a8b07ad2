//! Ray–splat evaluation in the Gaussian's local frame.
//!
//! With `K = M T` mapping local splat coordinates to camera space
//! (`x = A u + b`, `A = R_c R S`, `b = R_c μ + t_c`), a ray plane `(n, 0)`
//! pulls back to the local plane `Kᵀ(n, 0) = (Aᵀn, n·b)`. The ray's image in
//! local coordinates is the intersection line of the two pulled-back planes;
//! its minimum-norm point `u*` is the maximum-response point of the unit
//! Gaussian, so `ρ² = |u*|²` and the ray depth is `t = (A u* + b)·d`.

use nalgebra::{Matrix3, Vector3};

use crate::erp::RayPlanes;

pub const DEGENERATE_DET: f64 = 1e-18;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rejected {
    BehindCamera,
    Degenerate,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayHit {
    pub rho_sq: f64,
    pub t: f64,
}

/// Evaluates one splat (`A`, `b` in camera space) against one pixel ray.
#[inline]
pub fn eval(
    a: &Matrix3<f64>,
    b: &Vector3<f64>,
    planes: &RayPlanes,
    dir: &Vector3<f64>,
    near_clip: f64,
) -> Result<RayHit, Rejected> {
    let at = a.transpose();
    let a1 = at * planes.nx;
    let a2 = at * planes.ny;
    let c1 = planes.nx.dot(b);
    let c2 = planes.ny.dot(b);
    let g11 = a1.dot(&a1);
    let g12 = a1.dot(&a2);
    let g22 = a2.dot(&a2);
    let det = g11 * g22 - g12 * g12;
    if !(det >= DEGENERATE_DET) {
        return Err(Rejected::Degenerate);
    }
    let w1 = -(g22 * c1 - g12 * c2) / det;
    let w2 = -(g11 * c2 - g12 * c1) / det;
    let u = a1 * w1 + a2 * w2;
    let rho_sq = u.dot(&u);
    let t = (a * u + b).dot(dir);
    if t <= near_clip {
        return Err(Rejected::BehindCamera);
    }
    Ok(RayHit { rho_sq, t })
}

/// Adjoint of [`eval`]: maps `(dL/dρ², dL/dt)` to `(dL/dA, dL/db)`.
///
/// With `N = [nx ny]`, `P = A Aᵀ`, `G = NᵀPN`, `v = G⁻¹Nᵀb`, `m = N v`:
/// `ρ² = mᵀPm`, `∂ρ²/∂b = 2m`, `∂ρ²/∂P = −m mᵀ`; for the depth,
/// `∂t/∂b = −s` and `∂t/∂P = sym(s mᵀ)` with `s = N G⁻¹NᵀPd − d`.
#[inline]
pub fn eval_backward(
    a: &Matrix3<f64>,
    b: &Vector3<f64>,
    planes: &RayPlanes,
    dir: &Vector3<f64>,
    d_rho_sq: f64,
    d_t: f64,
) -> (Matrix3<f64>, Vector3<f64>) {
    let at = a.transpose();
    let a1 = at * planes.nx;
    let a2 = at * planes.ny;
    let c1 = planes.nx.dot(b);
    let c2 = planes.ny.dot(b);
    let g11 = a1.dot(&a1);
    let g12 = a1.dot(&a2);
    let g22 = a2.dot(&a2);
    let det = g11 * g22 - g12 * g12;
    let solve = |r1: f64, r2: f64| ((g22 * r1 - g12 * r2) / det, (g11 * r2 - g12 * r1) / det);
    let (v1, v2) = solve(c1, c2);
    let m = planes.nx * v1 + planes.ny * v2;
    let at_m = a1 * v1 + a2 * v2;
    let ad = at * dir;
    let (r1, r2) = solve(a1.dot(&ad), a2.dot(&ad));
    let s = planes.nx * r1 + planes.ny * r2 - dir;
    let at_s = at * s;
    let d_b = m * (2.0 * d_rho_sq) - s * d_t;
    let d_a = m * at_m.transpose() * (-2.0 * d_rho_sq) + (s * at_m.transpose() + m * at_s.transpose()) * d_t;
    (d_a, d_b)
}
