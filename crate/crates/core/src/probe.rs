//! Small randomized instances for finite-difference gradient checks.
//!
//! Every learnable group is given generic nonzero values and the targets are
//! offset from the current render, so that no per-pixel kink sits near the
//! evaluation point. Candidates whose gate margins are too tight are skipped.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::appearance::{AppearanceConfig, AppearanceNet};
use crate::diff::{self, GateMargins, GradCheckReport, GroupId, Model, PipelineConfig, View};
use crate::error::{Error, Result};
use crate::medium::{Medium, MediumConfig};
use crate::optim::filter::gaussian_3d_filter;
use crate::scene::{quat_to_rotation, sh, CameraPose, Gaussian3D, Scene};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ProbeConfig {
    pub gaussians: usize,
    pub width: usize,
    pub height: usize,
    pub views: usize,
    pub sh_degree: usize,
    pub appearance: AppearanceConfig,
    pub medium: MediumConfig,
    pub filter_kappa: f64,
    /// Keep the correction network's zero-initialized output layer.
    pub zero_correction_output: bool,
    pub eps: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Lower bounds on each gate margin.
    pub min_margins: GateMargins,
    pub max_attempts: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            gaussians: 10,
            width: 16,
            height: 8,
            views: 2,
            sh_degree: 2,
            appearance: AppearanceConfig { embed_dim: 4, hidden: 8, fourier_bands: 2 },
            medium: MediumConfig::default(),
            filter_kappa: 0.3,
            zero_correction_output: false,
            eps: 1e-4,
            rel_tol: 1e-3,
            abs_tol: 1e-7,
            min_margins: GateMargins {
                alpha: 5e-3,
                transmittance: 5e-2,
                coverage: 5e-3,
                color: 1e-3,
                relu: 5e-4,
                order: 5e-4,
                residual: 1e-2,
            },
            max_attempts: 500,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProbeInstance {
    pub seed: u64,
    pub model: Model,
    pub views: Vec<View>,
    pub filter: Vec<f64>,
    pub pipeline: PipelineConfig,
    pub margins: GateMargins,
}

fn random_quat(rng: &mut ChaCha8Rng) -> [f64; 4] {
    let n = Normal::new(0.0, 1.0).unwrap();
    let q: [f64; 4] = std::array::from_fn(|_| n.sample(rng));
    let len = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    q.map(|v| v / len)
}

fn perturb(model: &mut Model, g: GroupId, std: f64, rng: &mut ChaCha8Rng) {
    let n = Normal::new(0.0, std).unwrap();
    let v: Vec<f64> = model.group(g).iter().map(|x| x + n.sample(rng)).collect();
    model.set_group(g, &v);
}

/// Builds one candidate instance from `seed` without checking its margins.
pub fn probe_instance(cfg: &ProbeConfig, seed: u64) -> ProbeInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stride = sh::coeff_count(cfg.sh_degree) * 3;
    let sh_noise = Normal::new(0.0, 0.15).unwrap();
    let gaussians: Vec<Gaussian3D> = (0..cfg.gaussians)
        .map(|_| {
            let dir: [f64; 3] = UnitSphere.sample(&mut rng);
            let dist = rng.random_range(1.5..3.0);
            let mut sh_values: Vec<f64> = (0..stride).map(|_| sh_noise.sample(&mut rng)).collect();
            for c in 0..3 {
                sh_values[c] = rng.random_range(0.3..1.2);
            }
            Gaussian3D {
                mu: Vector3::from(dir) * dist,
                quat: random_quat(&mut rng),
                log_scale: Vector3::from_fn(|_, _| rng.random_range(0.25f64..0.7).ln()),
                raw_opacity: rng.random_range(-1.0..1.5),
                sh: sh_values,
            }
        })
        .collect();
    let scene = Scene::from_gaussians(cfg.sh_degree, &gaussians);
    let poses: Vec<CameraPose> = (0..cfg.views)
        .map(|i| {
            let c = Vector3::from_fn(|_, _| rng.random_range(-0.2..0.2));
            CameraPose::from_center(quat_to_rotation(&random_quat(&mut rng)), c, cfg.width, cfg.height, i)
        })
        .collect();
    let position_scale = scene.bounding_radius().max(1e-6);
    let appearance = AppearanceNet::new(&cfg.appearance, position_scale, rng.random());
    let medium = Medium::new(&cfg.medium, cfg.appearance.embed_dim, rng.random());
    let mut model = Model { scene, appearance, medium };
    if !cfg.zero_correction_output {
        perturb(&mut model, GroupId::CorrectMlp, 0.05, &mut rng);
    }
    perturb(&mut model, GroupId::Backscatter, 0.3, &mut rng);
    perturb(&mut model, GroupId::Attenuation, 0.3, &mut rng);

    let mut pipeline = PipelineConfig::default();
    pipeline.render.active_sh_degree = cfg.sh_degree;
    let filter = gaussian_3d_filter(&model.scene, &poses, cfg.filter_kappa);
    let views: Vec<View> = poses
        .into_iter()
        .map(|pose| {
            let f = diff::forward_view(&model, &pose, Some(&filter), &pipeline);
            let mut image = f.composed;
            for v in image.data.iter_mut() {
                let off = rng.random_range(0.05..0.3);
                *v += if rng.random_bool(0.5) { off } else { -off };
            }
            View { pose, image }
        })
        .collect();
    let margins = diff::gate_margins(&model, &views, Some(&filter), &pipeline);
    ProbeInstance { seed, model, views, filter, pipeline, margins }
}

fn margins_clear(m: &GateMargins, min: &GateMargins) -> bool {
    m.alpha >= min.alpha
        && m.transmittance >= min.transmittance
        && m.coverage >= min.coverage
        && m.color >= min.color
        && m.relu >= min.relu
        && m.order >= min.order
        && m.residual >= min.residual
}

/// First instance, from `seed` upward, whose gate margins all clear the
/// configured bounds.
pub fn find_probe_instance(cfg: &ProbeConfig, seed: u64) -> Result<ProbeInstance> {
    for k in 0..cfg.max_attempts as u64 {
        let inst = probe_instance(cfg, seed.wrapping_add(k));
        if margins_clear(&inst.margins, &cfg.min_margins) {
            return Ok(inst);
        }
    }
    Err(Error::NoProbeInstance { attempts: cfg.max_attempts })
}

/// Finds an instance and checks every parameter group on it.
pub fn run_grad_check(cfg: &ProbeConfig, seed: u64) -> Result<(ProbeInstance, GradCheckReport)> {
    let inst = find_probe_instance(cfg, seed)?;
    let report = diff::grad_check(
        &inst.model,
        &inst.views,
        Some(&inst.filter),
        &inst.pipeline,
        cfg.eps,
        cfg.rel_tol,
        cfg.abs_tol,
    )?;
    Ok((inst, report))
}
