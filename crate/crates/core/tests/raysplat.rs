mod common;

use nalgebra::{Matrix3, Vector3};
use omnisplat::erp::{pixel_to_dir, PixelCoord};
use omnisplat::renderer::ray_splat_eval;
use omnisplat::scene::{covariance, Gaussian3D};
use proptest::prelude::*;
use rand::Rng;

/// Squared Mahalanobis distance of the ray point `t·d` from the Gaussian,
/// all in camera coordinates.
fn mahalanobis(inv: &Matrix3<f64>, mu: &Vector3<f64>, d: &Vector3<f64>, t: f64) -> f64 {
    let r = d * t - mu;
    (r.transpose() * inv * r)[0]
}

/// Dense scan followed by golden-section refinement of the bracketing cell.
fn line_search(inv: &Matrix3<f64>, mu: &Vector3<f64>, d: &Vector3<f64>, lo: f64, hi: f64) -> (f64, f64) {
    let n = 4000;
    let step = (hi - lo) / n as f64;
    let f = |t: f64| mahalanobis(inv, mu, d, t);
    let best = (0..=n).map(|k| lo + k as f64 * step).min_by(|a, b| f(*a).total_cmp(&f(*b))).unwrap();
    let (mut a, mut b) = (best - step, best + step);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut e = a + g * (b - a);
    for _ in 0..200 {
        if f(c) < f(e) {
            b = e;
        } else {
            a = c;
        }
        c = b - g * (b - a);
        e = a + g * (b - a);
    }
    let t = 0.5 * (a + b);
    (t, f(t))
}

struct Case {
    g: Gaussian3D,
    pose: omnisplat::scene::CameraPose,
    pixel: PixelCoord,
}

fn random_case(rng: &mut impl Rng) -> Case {
    let (w, h) = (256, 128);
    let pose = common::random_pose(rng, w, h);
    let pixel = PixelCoord::new(rng.random_range(0.0..w as f64 - 1.0), rng.random_range(0.0..h as f64 - 1.0), w, h);
    let d_cam = pixel_to_dir(pixel).dir;
    let d_world = pose.rotation().transpose() * d_cam;
    let mut g = common::random_gaussian(rng, 0, Vector3::zeros());
    let along = rng.random_range(1.0..8.0);
    let offset = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
    g.mu = pose.center() + d_world * along + offset;
    Case { g, pose, pixel }
}

fn camera_frame(c: &Case) -> (Matrix3<f64>, Vector3<f64>, Vector3<f64>) {
    let r = c.pose.rotation();
    let sigma = r * covariance(&c.g) * r.transpose();
    let mu = r * c.g.mu + c.pose.translation();
    (sigma.try_inverse().unwrap(), mu, pixel_to_dir(c.pixel).dir)
}

#[test]
fn rho_squared_matches_line_search_on_random_pairs() {
    let mut rng = common::rng(11);
    let mut checked = 0;
    while checked < 1000 {
        let c = random_case(&mut rng);
        let Ok(hit) = ray_splat_eval(&c.g, &c.pose, c.pixel) else { continue };
        let (inv, mu, d) = camera_frame(&c);
        let (_, rho_oracle) = line_search(&inv, &mu, &d, -20.0, 40.0);
        let rel = (hit.rho_sq - rho_oracle).abs() / rho_oracle.abs().max(1e-10);
        assert!(rel < 1e-4, "rho² {} vs oracle {rho_oracle}", hit.rho_sq);
        // The returned depth must be the maximum-response point on the ray itself.
        let on_ray = mahalanobis(&inv, &mu, &d, hit.t);
        assert!((on_ray - hit.rho_sq).abs() < 1e-8 * hit.rho_sq.max(1.0), "t = {} off the ray", hit.t);
        checked += 1;
    }
}

#[test]
fn gaussian_behind_the_camera_is_rejected() {
    let mut rng = common::rng(12);
    for _ in 0..100 {
        let mut c = random_case(&mut rng);
        let d_world = c.pose.rotation().transpose() * pixel_to_dir(c.pixel).dir;
        c.g.mu = c.pose.center() - d_world * 5.0;
        c.g.log_scale = Vector3::repeat(0.1f64.ln());
        assert!(ray_splat_eval(&c.g, &c.pose, c.pixel).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rho_squared_is_a_minimum_along_the_ray(seed in any::<u64>(), dt in -0.5f64..0.5) {
        let mut rng = common::rng(seed);
        let c = random_case(&mut rng);
        if let Ok(hit) = ray_splat_eval(&c.g, &c.pose, c.pixel) {
            let (inv, mu, d) = camera_frame(&c);
            prop_assert!(hit.rho_sq >= 0.0);
            prop_assert!(mahalanobis(&inv, &mu, &d, hit.t + dt) >= hit.rho_sq - 1e-9 * hit.rho_sq.max(1.0));
        }
    }
}
