#![allow(dead_code)]

use nalgebra::Vector3;
use omnisplat::scene::{quat_to_rotation, CameraPose, Gaussian3D, Scene};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, UnitSphere};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn unit_quat(rng: &mut impl Rng) -> [f64; 4] {
    let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    q.map(|v| v / n)
}

pub fn random_gaussian(rng: &mut impl Rng, sh_degree: usize, around: Vector3<f64>) -> Gaussian3D {
    let dir: [f64; 3] = UnitSphere.sample(rng);
    let dist = rng.random_range(0.8..4.0);
    let k = (sh_degree + 1) * (sh_degree + 1) * 3;
    Gaussian3D {
        mu: around + Vector3::from(dir) * dist,
        quat: unit_quat(rng),
        log_scale: Vector3::from_fn(|_, _| rng.random_range(0.05f64..0.6).ln()),
        raw_opacity: rng.random_range(-2.0..3.0),
        sh: (0..k).map(|_| { let z: f64 = StandardNormal.sample(rng); 0.5 * z }).collect(),
    }
}

pub fn random_scene(rng: &mut impl Rng, n: usize, sh_degree: usize) -> Scene {
    let g: Vec<Gaussian3D> = (0..n).map(|_| random_gaussian(rng, sh_degree, Vector3::zeros())).collect();
    Scene::from_gaussians(sh_degree, &g)
}

pub fn random_pose(rng: &mut impl Rng, width: usize, height: usize) -> CameraPose {
    let c = Vector3::from_fn(|_, _| rng.random_range(-0.3..0.3));
    CameraPose::from_center(quat_to_rotation(&unit_quat(rng)), c, width, height, 0)
}
