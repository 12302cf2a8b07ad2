//! Adam with per-group learning rates.
//!
//! Entries whose gradient is exactly zero in a step are left untouched
//! (parameter and moments), so Gaussians that did not contribute to the
//! sampled view do not drift on stale momentum. Parameters and moments are
//! kept at `f32` precision so checkpoints round-trip bit-exactly.

use serde::{Deserialize, Serialize};

use crate::diff::{Gradients, GroupId, Model, GROUP_COUNT};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-15 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    /// First and second moments per group, same layout as the parameters.
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

/// Learning rate per group; SH coefficients beyond the DC term use `sh_rest`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupRates {
    pub per_group: [f64; GROUP_COUNT],
    pub sh_rest: f64,
}

impl AdamState {
    pub fn new(model: &Model) -> Self {
        let zeros = || GroupId::ALL.iter().map(|g| vec![0.0; model.group_len(*g)]).collect();
        Self { step: 0, m: zeros(), v: zeros() }
    }

    /// Rebuilds the per-Gaussian moments after a topology change; `sources[k]`
    /// is the old index the new Gaussian `k` inherits moments from, if any.
    pub fn reindex(&mut self, sources: &[Option<usize>], sh_stride: usize) {
        for g in GroupId::ALL.into_iter().filter(|g| g.is_per_gaussian()) {
            let w = match g {
                GroupId::Mu | GroupId::LogScale => 3,
                GroupId::Quat => 4,
                GroupId::RawOpacity => 1,
                _ => sh_stride,
            };
            for buf in [&mut self.m[g.index()], &mut self.v[g.index()]] {
                let mut out = Vec::with_capacity(sources.len() * w);
                for s in sources {
                    match s {
                        Some(i) => out.extend_from_slice(&buf[i * w..(i + 1) * w]),
                        None => out.extend(std::iter::repeat_n(0.0, w)),
                    }
                }
                *buf = out;
            }
        }
    }

    pub fn zero_group(&mut self, g: GroupId) {
        self.m[g.index()].iter_mut().for_each(|v| *v = 0.0);
        self.v[g.index()].iter_mut().for_each(|v| *v = 0.0);
    }
}

fn update(p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], lr: impl Fn(usize) -> f64, cfg: &AdamConfig, bc1: f64, bc2: f64) {
    for k in 0..p.len() {
        if g[k] == 0.0 {
            continue;
        }
        let mk = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
        let vk = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
        m[k] = mk as f32 as f64;
        v[k] = vk as f32 as f64;
        let step = lr(k) * (mk / bc1) / ((vk / bc2).sqrt() + cfg.eps);
        p[k] = (p[k] - step) as f32 as f64;
    }
}

/// One Adam step over every group, then quaternion renormalization.
pub fn adam_step(state: &mut AdamState, model: &mut Model, grads: &Gradients, rates: &GroupRates, cfg: &AdamConfig) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let sh_stride = model.scene.sh_stride();
    for g in GroupId::ALL {
        let lr = rates.per_group[g.index()];
        let grad = grads.group(g);
        let (m, v) = (&mut state.m[g.index()], &mut state.v[g.index()]);
        let lr_of = |k: usize| if g == GroupId::Sh && k % sh_stride >= 3 { rates.sh_rest } else { lr };
        match model.group_slice_mut(g) {
            Some(p) => update(p, grad, m, v, lr_of, cfg, bc1, bc2),
            None => {
                let mut p = model.group(g);
                update(&mut p, grad, m, v, lr_of, cfg, bc1, bc2);
                model.set_group(g, &p);
            }
        }
    }
    model.scene.normalize_quats();
    for q in model.scene.quat.iter_mut() {
        *q = *q as f32 as f64;
    }
}
