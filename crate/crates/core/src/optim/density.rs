//! Adaptive density control: clone small and split large Gaussians with a
//! high screen-space position gradient, prune transparent or oversized ones.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use crate::diff::{Gradients, GroupId, Model};
use crate::scene::{logit, quat_to_rotation, sigmoid, Gaussian3D, Scene};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DensifyConfig {
    pub enabled: bool,
    pub grad_threshold: f64,
    pub interval: u64,
    pub start_iter: u64,
    /// Densification stops after this fraction of the total iterations.
    pub stop_fraction: f64,
    pub prune_opacity: f64,
    /// Clone when the largest scale is at most this fraction of the extent, split otherwise.
    pub split_scale_fraction: f64,
    /// Prune Gaussians whose largest scale exceeds this fraction of the extent.
    pub max_scale_fraction: f64,
    pub split_factor: f64,
    pub opacity_reset_interval: u64,
    pub opacity_reset_value: f64,
    /// Upper bound on the Gaussian count; when densification would exceed
    /// it, only the candidates with the largest gradients are densified.
    pub max_gaussians: usize,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            grad_threshold: 2e-4,
            interval: 100,
            start_iter: 500,
            stop_fraction: 0.5,
            prune_opacity: 0.005,
            split_scale_fraction: 0.01,
            max_scale_fraction: 0.5,
            split_factor: 1.6,
            opacity_reset_interval: 3000,
            opacity_reset_value: 0.01,
            max_gaussians: 50_000,
        }
    }
}

/// Screen-space gradient norms accumulated between densification events.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DensifyStats {
    pub grad_sum: Vec<f64>,
    pub count: Vec<u32>,
}

impl DensifyStats {
    pub fn new(n: usize) -> Self {
        Self { grad_sum: vec![0.0; n], count: vec![0; n] }
    }

    pub fn accumulate(&mut self, g: &Gradients) {
        for i in 0..self.count.len() {
            if g.visible[i] > 0 {
                self.grad_sum[i] += g.screen_grad[i];
                self.count[i] += g.visible[i];
            }
        }
    }

    pub fn mean(&self, i: usize) -> f64 {
        if self.count[i] == 0 {
            0.0
        } else {
            self.grad_sum[i] / self.count[i] as f64
        }
    }
}

/// Counts of one densification event; `after = before + clones + splits − pruned`,
/// where each split replaces its parent with two children.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DensifyEvent {
    pub iteration: u64,
    pub before: usize,
    pub clones: usize,
    pub splits: usize,
    pub pruned: usize,
    pub after: usize,
}

fn max_scale(scene: &Scene, i: usize) -> f64 {
    scene.log_scale_of(i).max().exp()
}

/// Applies clone/split/prune and rebuilds the optimizer moments; new
/// Gaussians start with zero moments.
pub fn densify_and_prune(
    model: &mut Model,
    stats: &DensifyStats,
    adam: &mut AdamState,
    cfg: &DensifyConfig,
    extent: f64,
    iteration: u64,
    rng: &mut impl Rng,
) -> DensifyEvent {
    let scene = &model.scene;
    let n = scene.len();
    let mut candidates: Vec<usize> = (0..n).filter(|&i| stats.mean(i) > cfg.grad_threshold).collect();
    let room = cfg.max_gaussians.saturating_sub(n);
    if candidates.len() > room {
        candidates.sort_by(|&a, &b| stats.mean(b).total_cmp(&stats.mean(a)).then(a.cmp(&b)));
        candidates.truncate(room);
    }
    let mut selected = vec![false; n];
    for i in candidates {
        selected[i] = true;
    }
    let mut kept: Vec<(Gaussian3D, Option<usize>)> = Vec::with_capacity(n);
    let mut cloned = Vec::new();
    let mut children = Vec::new();
    for i in 0..n {
        let g = scene.gaussian(i);
        if !selected[i] {
            kept.push((g, Some(i)));
            continue;
        }
        if max_scale(scene, i) <= cfg.split_scale_fraction * extent {
            cloned.push(g.clone());
            kept.push((g, Some(i)));
        } else {
            let r: Matrix3<f64> = quat_to_rotation(&g.quat);
            let s = g.scales();
            for _ in 0..2 {
                let z = Vector3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
                let mut c = g.clone();
                c.mu = g.mu + r * s.component_mul(&z);
                c.log_scale = g.log_scale.map(|l| l - cfg.split_factor.ln());
                children.push(c);
            }
        }
    }
    let clones = cloned.len();
    let splits = children.len() / 2;
    let mut all: Vec<(Gaussian3D, Option<usize>)> = kept;
    all.extend(cloned.into_iter().map(|g| (g, None)));
    all.extend(children.into_iter().map(|g| (g, None)));
    let grown = all.len();
    all.retain(|(g, _)| {
        let too_big = g.scales().max() > cfg.max_scale_fraction * extent;
        sigmoid(g.raw_opacity) >= cfg.prune_opacity && !too_big
    });
    let pruned = grown - all.len();

    let mut next = Scene::empty(model.scene.sh_degree);
    let mut sources = Vec::with_capacity(all.len());
    for (g, src) in &all {
        next.push(g);
        sources.push(*src);
    }
    for v in next.mu.iter_mut().chain(next.log_scale.iter_mut()) {
        *v = *v as f32 as f64;
    }
    model.scene = next;
    adam.reindex(&sources, model.scene.sh_stride());
    DensifyEvent { iteration, before: n, clones, splits, pruned, after: model.scene.len() }
}

/// Caps every opacity at `value` and clears the opacity moments.
pub fn reset_opacity(model: &mut Model, adam: &mut AdamState, value: f64) {
    let cap = logit(value) as f32 as f64;
    for r in model.scene.raw_opacity.iter_mut() {
        if *r > cap {
            *r = cap;
        }
    }
    adam.zero_group(GroupId::RawOpacity);
}
