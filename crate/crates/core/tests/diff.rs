mod common;

use std::collections::BTreeSet;

use nalgebra::{Matrix3, Vector3};
use omnisplat::appearance::{AppearanceConfig, AppearanceNet};
use omnisplat::diff::{self, GroupId, Model, PipelineConfig, View};
use omnisplat::medium::{Medium, MediumConfig};
use omnisplat::probe::{find_probe_instance, run_grad_check, ProbeConfig};
use omnisplat::scene::{CameraPose, Gaussian3D, Scene};

fn small_model(scene: Scene) -> Model {
    let app = AppearanceConfig { embed_dim: 4, hidden: 8, fourier_bands: 2 };
    Model {
        scene,
        appearance: AppearanceNet::new(&app, 5.0, 3),
        medium: Medium::new(&MediumConfig::default(), app.embed_dim, 4),
    }
}

fn front_gaussian(raw_opacity: f64, dc: [f64; 3]) -> Gaussian3D {
    Gaussian3D {
        mu: Vector3::new(0.2, 0.1, -3.0),
        quat: [1.0, 0.0, 0.0, 0.0],
        log_scale: Vector3::new(0.6f64.ln(), 0.4f64.ln(), 0.5f64.ln()),
        raw_opacity,
        sh: dc.to_vec(),
    }
}

fn origin_pose(w: usize, h: usize) -> CameraPose {
    CameraPose::from_center(Matrix3::identity(), Vector3::zeros(), w, h, 0)
}

fn self_consistent_views(model: &Model, poses: &[CameraPose], cfg: &PipelineConfig) -> Vec<View> {
    poses
        .iter()
        .map(|p| View { pose: p.clone(), image: diff::forward_view(model, p, None, cfg).composed })
        .collect()
}

#[test]
fn every_group_matches_central_differences() {
    let cfg = ProbeConfig::default();
    let (inst, report) = run_grad_check(&cfg, 1).unwrap();
    assert_eq!(inst.model.scene.len(), 10);
    assert_eq!(inst.views.len(), 2);
    for g in &report.groups {
        assert!(g.failing.is_empty(), "{}: {} failing, max rel {:.3e}", g.group, g.failing.len(), g.max_rel_error);
    }
}

#[test]
fn zero_initialized_correction_layer_still_checks_out() {
    let cfg = ProbeConfig { zero_correction_output: true, ..Default::default() };
    let (inst, report) = run_grad_check(&cfg, 40).unwrap();
    let net = &inst.model.appearance.correct_mlp;
    let last = net.n_out * net.n_hidden + net.n_out;
    assert!(net.params[net.params.len() - last..].iter().all(|v| *v == 0.0));
    let g = report.groups.iter().find(|g| g.group == GroupId::CorrectMlp.name()).unwrap();
    assert!(g.failing.is_empty());
    assert!(report.passed());
}

#[test]
fn report_lists_every_group_once() {
    let (_, report) = run_grad_check(&ProbeConfig::default(), 7).unwrap();
    let names: Vec<&str> = report.groups.iter().map(|g| g.group.as_str()).collect();
    let unique: BTreeSet<&str> = names.iter().copied().collect();
    assert_eq!(names.len(), GroupId::ALL.len());
    assert_eq!(unique, GroupId::ALL.iter().map(|g| g.name()).collect());
}

#[test]
fn finite_difference_error_shrinks_quadratically() {
    let cfg = ProbeConfig::default();
    let inst = find_probe_instance(&cfg, 3).unwrap();
    let (_, grads) = diff::backward(&inst.model, &inst.views, Some(&inst.filter), &inst.pipeline).unwrap();
    let base = inst.model.group(GroupId::LogScale);
    let fd = |k: usize, eps: f64| {
        let eval = |delta: f64| {
            let mut m = inst.model.clone();
            let mut v = base.clone();
            v[k] += delta;
            m.set_group(GroupId::LogScale, &v);
            diff::forward_loss(&m, &inst.views, Some(&inst.filter), &inst.pipeline).unwrap()
        };
        (eval(eps) - eval(-eps)) / (2.0 * eps)
    };
    let analytic = grads.group(GroupId::LogScale);
    let mut ratios = Vec::new();
    for k in 0..base.len() {
        let e1 = (fd(k, 1e-3) - analytic[k]).abs();
        let e2 = (fd(k, 2e-3) - analytic[k]).abs();
        if e1 > 1e-9 {
            ratios.push(e2 / e1);
        }
    }
    assert!(ratios.len() >= 5, "too few entries above round-off");
    ratios.sort_by(f64::total_cmp);
    let median = ratios[ratios.len() / 2];
    assert!((3.0..5.0).contains(&median), "median error ratio {median}");
}

#[test]
fn self_consistent_targets_give_zero_loss() {
    let mut rng = common::rng(21);
    let model = small_model(common::random_scene(&mut rng, 30, 1));
    let cfg = PipelineConfig::default();
    let poses = [common::random_pose(&mut rng, 32, 16), common::random_pose(&mut rng, 32, 16)];
    let views = self_consistent_views(&model, &poses, &cfg);
    assert!(diff::forward_loss(&model, &views, None, &cfg).unwrap().abs() < 1e-12);
}

#[test]
fn loss_ignores_view_order() {
    let mut rng = common::rng(22);
    let model = small_model(common::random_scene(&mut rng, 30, 1));
    let cfg = PipelineConfig::default();
    let views: Vec<View> = (0..3)
        .map(|_| {
            let pose = common::random_pose(&mut rng, 32, 16);
            let image = omnisplat::Image::from_fn(32, 16, 3, |x, y, c| ((x * 7 + y * 3 + c) % 11) as f64 / 11.0);
            View { pose, image }
        })
        .collect();
    let mut rev = views.clone();
    rev.reverse();
    let a = diff::forward_loss(&model, &views, None, &cfg).unwrap();
    let b = diff::forward_loss(&model, &rev, None, &cfg).unwrap();
    assert!((a - b).abs() <= 1e-12 * a.abs());
}

#[test]
fn gaussian_at_the_camera_center_gets_no_gradient() {
    let mut gs = vec![front_gaussian(0.5, [0.3, -0.2, 0.1])];
    gs.push(Gaussian3D {
        mu: Vector3::zeros(),
        quat: [1.0, 0.0, 0.0, 0.0],
        log_scale: Vector3::repeat(0.05f64.ln()),
        raw_opacity: 1.0,
        sh: vec![0.4, 0.1, -0.3],
    });
    let model = small_model(Scene::from_gaussians(0, &gs));
    let cfg = PipelineConfig::default();
    let pose = origin_pose(32, 16);
    let image = omnisplat::Image::filled(32, 16, 3, 0.3);
    let (_, grads) = diff::backward(&model, &[View { pose, image }], None, &cfg).unwrap();
    for g in GroupId::ALL.into_iter().filter(|g| g.is_per_gaussian()) {
        let v = grads.group(g);
        let per = v.len() / 2;
        assert!(v[per..].iter().all(|x| *x == 0.0), "{} of the rejected gaussian: {:?}", g.name(), &v[per..]);
        assert!(v[..per].iter().any(|x| *x != 0.0), "{} of the visible gaussian is all zero", g.name());
    }
}

#[test]
fn opacity_gradient_sign_agrees_with_a_sweep() {
    let cfg = PipelineConfig { use_appearance: false, ..Default::default() };
    let pose = origin_pose(32, 16);
    for (target, raw) in [(0.9, 0.0), (0.05, 0.0), (0.6, -1.0), (0.2, 1.5)] {
        let model = small_model(Scene::from_gaussians(0, &[front_gaussian(raw, [1.0, 0.5, 0.2])]));
        let views = [View { pose: pose.clone(), image: omnisplat::Image::filled(32, 16, 3, target) }];
        let (_, grads) = diff::backward(&model, &views, None, &cfg).unwrap();
        let analytic = grads.group(GroupId::RawOpacity)[0];
        let at = |r: f64| {
            let mut m = model.clone();
            m.scene.raw_opacity[0] = r;
            diff::forward_loss(&m, &views, None, &cfg).unwrap()
        };
        let slope = at(raw + 0.01) - at(raw - 0.01);
        assert!(analytic != 0.0 && slope.signum() == analytic.signum(), "target {target}: sweep {slope}, analytic {analytic}");
    }
}

#[test]
fn moving_the_dc_color_toward_the_target_lowers_the_loss() {
    let cfg = PipelineConfig { use_appearance: false, use_medium: false, ..Default::default() };
    let pose = origin_pose(32, 16);
    let best = [0.8, -0.4, 0.3];
    let truth = small_model(Scene::from_gaussians(0, &[front_gaussian(1.0, best)]));
    let views = self_consistent_views(&truth, std::slice::from_ref(&pose), &cfg);
    let start = [-0.5, 0.6, -0.2];
    let losses: Vec<f64> = (0..=10)
        .map(|k| {
            let s = k as f64 / 10.0;
            let dc: Vec<f64> = (0..3).map(|c| start[c] + s * (best[c] - start[c])).collect();
            let mut m = truth.clone();
            m.scene.sh.copy_from_slice(&dc);
            diff::forward_loss(&m, &views, None, &cfg).unwrap()
        })
        .collect();
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    assert!(losses[10] < 1e-12);
}
