//! Training loop: seeded round-robin over training views, Adam updates,
//! density control, opacity resets, SH unlocking and periodic evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, AdamState, GroupRates};
use super::density::{densify_and_prune, reset_opacity, DensifyConfig, DensifyEvent, DensifyStats};
use super::filter::gaussian_3d_filter;
use super::loss;
use crate::appearance::{AppearanceConfig, AppearanceNet};
use crate::diff::{self, GroupId, Model, PipelineConfig, View, GROUP_COUNT};
use crate::error::{Error, Result};
use crate::io::Dataset;
use crate::medium::{Medium, MediumConfig};
use crate::scene::{init_scene, sh, CameraPose, InitConfig, RandomFallback};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct LearningRates {
    /// Position rate at the start, multiplied by the scene extent.
    pub position_init: f64,
    pub position_final: f64,
    pub quat: f64,
    pub log_scale: f64,
    pub opacity: f64,
    pub sh_dc: f64,
    pub sh_rest: f64,
    pub pose_mlp: f64,
    pub correct_mlp: f64,
    pub backscatter: f64,
    pub attenuation: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position_init: 1.6e-4,
            position_final: 1.6e-6,
            quat: 1e-3,
            log_scale: 5e-3,
            opacity: 0.05,
            sh_dc: 2.5e-3,
            sh_rest: 2.5e-3 / 20.0,
            pose_mlp: 1e-4,
            correct_mlp: 1e-4,
            backscatter: 1e-2,
            attenuation: 1e-2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: u64,
    pub seed: u64,
    pub pipeline: PipelineConfig,
    pub init: InitConfig,
    pub appearance: AppearanceConfig,
    pub medium: MediumConfig,
    pub adam: AdamConfig,
    pub lr: LearningRates,
    pub densify: DensifyConfig,
    pub sh_unlock_interval: u64,
    pub filter_kappa: f64,
    pub filter_interval: u64,
    pub eval_interval: u64,
    /// When positive, the far depth is this multiple of the scene extent.
    pub d_max_extent_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            seed: 0,
            pipeline: PipelineConfig::default(),
            init: InitConfig::default(),
            appearance: AppearanceConfig::default(),
            medium: MediumConfig::default(),
            adam: AdamConfig::default(),
            lr: LearningRates::default(),
            densify: DensifyConfig::default(),
            sh_unlock_interval: 1000,
            filter_kappa: 0.3,
            filter_interval: 100,
            eval_interval: 500,
            d_max_extent_factor: 2.0,
        }
    }
}

/// Mutable training state; everything needed to resume is in the checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub adam: AdamState,
    pub iteration: u64,
    pub active_sh_degree: usize,
    /// Scene extent used to scale learning rates and size thresholds.
    pub extent: f64,
    pub filter: Vec<f64>,
}

/// One evaluation record of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iter: u64,
    /// Mean training loss since the previous record.
    pub loss: f64,
    pub psnr_train: f64,
    pub psnr_test: f64,
    pub ssim_test: f64,
    pub n_gaussians: usize,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub state: TrainState,
    pub metrics: Vec<MetricsRecord>,
    pub densify: Vec<DensifyEvent>,
}

/// Receives progress events from the training loop.
pub trait TrainObserver {
    fn on_metrics(&mut self, _record: &MetricsRecord, _state: &TrainState) {}
    fn on_densify(&mut self, _event: &DensifyEvent) {}
}

impl TrainObserver for () {}

fn views_of(dataset: &Dataset, ids: &[usize]) -> Vec<View> {
    ids.iter()
        .map(|&i| View { pose: dataset.frames[i].pose.clone(), image: dataset.frames[i].image.clone() })
        .collect()
}

fn train_poses(dataset: &Dataset) -> Vec<CameraPose> {
    dataset.train.iter().map(|&i| dataset.frames[i].pose.clone()).collect()
}

/// Builds the initial model from the dataset's point cloud (or a random
/// fallback around the cameras when it has none).
pub fn init_state(dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainState> {
    if dataset.train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let poses = train_poses(dataset);
    let mut init = cfg.init.clone();
    if dataset.points.is_empty() && init.fallback.is_none() {
        let cam_radius = poses.iter().map(|p| p.center().norm()).fold(0.0, f64::max);
        init.fallback = Some(RandomFallback { count: 5000, radius: (3.0 * cam_radius).max(1.0), seed: cfg.seed });
    }
    let scene = init_scene(&dataset.points, &init)?;
    let extent = match scene.bounding_radius() {
        r if r > 0.0 => r,
        _ => 1.0,
    };
    let appearance = AppearanceNet::new(&cfg.appearance, extent, cfg.seed.wrapping_add(0x5eed_0001));
    let medium = Medium::new(&cfg.medium, cfg.appearance.embed_dim, cfg.seed.wrapping_add(0x5eed_0002));
    let mut model = Model { scene, appearance, medium };
    model.round_to_f32();
    let adam = AdamState::new(&model);
    let filter = gaussian_3d_filter(&model.scene, &poses, cfg.filter_kappa);
    Ok(TrainState { model, adam, iteration: 0, active_sh_degree: 0, extent, filter })
}

pub fn pipeline_for(state: &TrainState, cfg: &TrainConfig) -> PipelineConfig {
    let mut p = cfg.pipeline.clone();
    p.render.active_sh_degree = state.active_sh_degree;
    if cfg.d_max_extent_factor > 0.0 {
        p.render.d_max = cfg.d_max_extent_factor * state.extent;
    }
    p
}

/// Mean PSNR and SSIM of the composed render against the observations.
pub fn evaluate_views(state: &TrainState, views: &[View], cfg: &PipelineConfig) -> Result<(f64, f64)> {
    if views.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let (mut p, mut s) = (0.0, 0.0);
    for v in views {
        let f = diff::forward_view(&state.model, &v.pose, Some(&state.filter), cfg);
        let clamped = f.composed.clamped(0.0, 1.0);
        p += loss::psnr(&clamped, &v.image)?;
        s += loss::ssim(&clamped, &v.image, &cfg.loss)?;
    }
    let n = views.len() as f64;
    Ok((p / n, s / n))
}

fn rates(state: &TrainState, cfg: &TrainConfig) -> GroupRates {
    let lr = &cfg.lr;
    let t = (state.iteration as f64 / cfg.iterations.max(1) as f64).clamp(0.0, 1.0);
    let pos = (lr.position_init.ln() * (1.0 - t) + lr.position_final.ln() * t).exp() * state.extent;
    let mut per_group = [0.0; GROUP_COUNT];
    per_group[GroupId::Mu.index()] = pos;
    per_group[GroupId::Quat.index()] = lr.quat;
    per_group[GroupId::LogScale.index()] = lr.log_scale;
    per_group[GroupId::RawOpacity.index()] = lr.opacity;
    per_group[GroupId::Sh.index()] = lr.sh_dc;
    if cfg.pipeline.use_appearance {
        per_group[GroupId::PoseMlp.index()] = lr.pose_mlp;
        per_group[GroupId::CorrectMlp.index()] = lr.correct_mlp;
    }
    if cfg.pipeline.use_medium {
        per_group[GroupId::Backscatter.index()] = lr.backscatter;
        per_group[GroupId::Attenuation.index()] = lr.attenuation;
    }
    GroupRates { per_group, sh_rest: lr.sh_rest }
}

/// Seeded permutation of the training views for one pass.
fn epoch_order(train: &[usize], seed: u64, epoch: u64) -> Vec<usize> {
    let mut order = train.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    order.shuffle(&mut rng);
    order
}

/// Runs the configured number of iterations from a fresh state.
pub fn train(dataset: &Dataset, cfg: &TrainConfig, observer: &mut impl TrainObserver) -> Result<TrainResult> {
    let state = init_state(dataset, cfg)?;
    train_from(dataset, cfg, state, observer)
}

/// Continues training from `state` up to `cfg.iterations`.
pub fn train_from(
    dataset: &Dataset,
    cfg: &TrainConfig,
    mut state: TrainState,
    observer: &mut impl TrainObserver,
) -> Result<TrainResult> {
    if dataset.train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let train_views = views_of(dataset, &dataset.train);
    let test_views = views_of(dataset, &dataset.test);
    let poses = train_poses(dataset);
    let max_degree = state.model.scene.sh_degree.min(sh::MAX_SH_DEGREE);
    let stop_densify = (cfg.densify.stop_fraction * cfg.iterations as f64) as u64;

    let mut stats = DensifyStats::new(state.model.scene.len());
    let mut metrics = Vec::new();
    let mut events = Vec::new();
    let mut loss_sum = 0.0;
    let mut loss_count = 0u64;
    let mut order = Vec::new();

    while state.iteration < cfg.iterations {
        let it = state.iteration;
        let n_train = train_views.len() as u64;
        if it % n_train == 0 || order.is_empty() {
            let idx: Vec<usize> = (0..train_views.len()).collect();
            order = epoch_order(&idx, cfg.seed, it / n_train);
        }
        let view = &train_views[order[(it % n_train) as usize]];
        let pipeline = pipeline_for(&state, cfg);
        let (value, grads, _) = diff::backward_view(&state.model, view, Some(&state.filter), &pipeline)?;
        loss_sum += value;
        loss_count += 1;
        let in_densify_window = cfg.densify.enabled && it < stop_densify;
        if in_densify_window {
            stats.accumulate(&grads);
        }
        let r = rates(&state, cfg);
        adam_step(&mut state.adam, &mut state.model, &grads, &r, &cfg.adam);
        state.iteration += 1;
        let it = state.iteration;

        if cfg.sh_unlock_interval > 0 && it % cfg.sh_unlock_interval == 0 && state.active_sh_degree < max_degree {
            state.active_sh_degree += 1;
        }
        let mut topology_changed = false;
        if in_densify_window && it > cfg.densify.start_iter && it % cfg.densify.interval == 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ it);
            let ev = densify_and_prune(&mut state.model, &stats, &mut state.adam, &cfg.densify, state.extent, it, &mut rng);
            log::debug!("densify at {it}: {ev:?}");
            observer.on_densify(&ev);
            events.push(ev);
            stats = DensifyStats::new(state.model.scene.len());
            topology_changed = true;
        }
        if cfg.densify.enabled
            && cfg.densify.opacity_reset_interval > 0
            && it % cfg.densify.opacity_reset_interval == 0
            && it < stop_densify
        {
            reset_opacity(&mut state.model, &mut state.adam, cfg.densify.opacity_reset_value);
        }
        if topology_changed || (cfg.filter_interval > 0 && it % cfg.filter_interval == 0) {
            state.filter = gaussian_3d_filter(&state.model.scene, &poses, cfg.filter_kappa);
        }
        if (cfg.eval_interval > 0 && it % cfg.eval_interval == 0) || it == cfg.iterations {
            let pipeline = pipeline_for(&state, cfg);
            let (psnr_train, _) = evaluate_views(&state, &train_views, &pipeline)?;
            let (psnr_test, ssim_test) = evaluate_views(&state, &test_views, &pipeline)?;
            let rec = MetricsRecord {
                iter: it,
                loss: loss_sum / loss_count.max(1) as f64,
                psnr_train,
                psnr_test,
                ssim_test,
                n_gaussians: state.model.scene.len(),
            };
            loss_sum = 0.0;
            loss_count = 0;
            observer.on_metrics(&rec, &state);
            metrics.push(rec);
        }
    }
    Ok(TrainResult { state, metrics, densify: events })
}
