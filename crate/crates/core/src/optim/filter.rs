//! Isotropic 3D smoothing filter: each Gaussian's covariance is dilated by
//! `σ_min² I` at render time, where `σ_min` is a fraction of the footprint of
//! one ERP pixel at the closest training camera.

use rayon::prelude::*;

use crate::erp::pixel_angle;
use crate::scene::{CameraPose, Scene};

/// `σ_min` per Gaussian; all zeros when `kappa = 0`.
pub fn gaussian_3d_filter(scene: &Scene, train_poses: &[CameraPose], kappa: f64) -> Vec<f64> {
    assert!(!train_poses.is_empty(), "at least one training pose");
    let centers: Vec<_> = train_poses.iter().map(|p| (p.center(), pixel_angle(p.width))).collect();
    (0..scene.len())
        .into_par_iter()
        .map(|i| {
            if kappa == 0.0 {
                return 0.0;
            }
            let mu = scene.mu_of(i);
            centers.iter().map(|(c, delta)| kappa * delta * (mu - c).norm()).fold(f64::INFINITY, f64::min)
        })
        .collect()
}
