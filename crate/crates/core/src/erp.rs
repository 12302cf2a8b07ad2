//! Equirectangular camera geometry.
//!
//! Camera space follows the ERP convention `d = (sinφ cosθ, sinθ, −cosφ cosθ)`:
//! the image center looks down `−z`, column index grows with longitude φ toward
//! `+x`, and row index grows with latitude θ toward `+y`, so the bottom image
//! row maps to `+y`.
//!
//! Ray planes are built so that `(dir, nx, ny)` is a right-handed orthonormal
//! triad, i.e. `nx × ny = dir`.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use nalgebra::{Vector3, Vector4};

/// Continuous pixel position on a `width × height` panorama.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelCoord {
    pub px: f64,
    pub py: f64,
    pub width: usize,
    pub height: usize,
}

impl PixelCoord {
    pub fn new(px: f64, py: f64, width: usize, height: usize) -> Self {
        Self { px, py, width, height }
    }

    /// Center of integer pixel `(x, y)`.
    pub fn center(x: usize, y: usize, width: usize, height: usize) -> Self {
        Self::new(x as f64, y as f64, width, height)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphericalDir {
    /// Longitude in radians.
    pub phi: f64,
    /// Latitude in radians.
    pub theta: f64,
    /// Unit direction in camera coordinates.
    pub dir: Vector3<f64>,
}

/// Two planes through the camera origin that both contain a viewing ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayPlanes {
    pub nx: Vector3<f64>,
    pub ny: Vector3<f64>,
}

impl RayPlanes {
    /// Homogeneous form `(nxᵀ, 0)ᵀ`.
    pub fn pi_x(&self) -> Vector4<f64> {
        self.nx.push(0.0)
    }

    /// Homogeneous form `(nyᵀ, 0)ᵀ`.
    pub fn pi_y(&self) -> Vector4<f64> {
        self.ny.push(0.0)
    }
}

pub fn angles_to_dir(phi: f64, theta: f64) -> Vector3<f64> {
    let (sp, cp) = phi.sin_cos();
    let (st, ct) = theta.sin_cos();
    Vector3::new(sp * ct, st, -cp * ct)
}

pub fn pixel_to_dir(p: PixelCoord) -> SphericalDir {
    let phi = ((p.px + 0.5) / p.width as f64 - 0.5) * TAU;
    let theta = ((p.py + 0.5) / p.height as f64 - 0.5) * PI;
    SphericalDir { phi, theta, dir: angles_to_dir(phi, theta) }
}

/// Inverse of [`pixel_to_dir`]. Longitude wraps into `[0, width)`; at the poles
/// the longitude is taken as zero.
pub fn dir_to_pixel(d: &Vector3<f64>, width: usize, height: usize) -> PixelCoord {
    let (w, h) = (width as f64, height as f64);
    let phi = if d.x == 0.0 && d.z == 0.0 { 0.0 } else { d.x.atan2(-d.z) };
    let theta = d.y.clamp(-1.0, 1.0).asin();
    let mut px = (phi / TAU + 0.5) * w - 0.5;
    if px < 0.0 {
        px += w;
    } else if px >= w {
        px -= w;
    }
    let py = (theta / PI + 0.5) * h - 0.5;
    PixelCoord::new(px, py, width, height)
}

/// Longitude/latitude of a unit direction (same conventions as [`dir_to_pixel`]).
pub fn dir_to_angles(d: &Vector3<f64>) -> (f64, f64) {
    let phi = if d.x == 0.0 && d.z == 0.0 { 0.0 } else { d.x.atan2(-d.z) };
    (phi, d.y.clamp(-1.0, 1.0).asin())
}

pub fn ray_planes_for(dir: &SphericalDir) -> RayPlanes {
    let (sp, cp) = dir.phi.sin_cos();
    let nx = Vector3::new(cp, 0.0, sp);
    let cross = dir.dir.cross(&nx);
    // |d × nx| is 1 analytically; the division only absorbs rounding.
    let ny = cross / cross.norm();
    RayPlanes { nx, ny }
}

pub fn ray_planes(p: PixelCoord) -> RayPlanes {
    ray_planes_for(&pixel_to_dir(p))
}

/// Per-pixel rays of an integer pixel grid.
#[derive(Debug, Clone)]
pub struct ErpGrid {
    pub width: usize,
    pub height: usize,
    pub dirs: Vec<Vector3<f64>>,
    pub planes: Vec<RayPlanes>,
}

impl ErpGrid {
    pub fn new(width: usize, height: usize) -> Self {
        let mut dirs = Vec::with_capacity(width * height);
        let mut planes = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                let sd = pixel_to_dir(PixelCoord::center(x, y, width, height));
                planes.push(ray_planes_for(&sd));
                dirs.push(sd.dir);
            }
        }
        Self { width, height, dirs, planes }
    }

    #[inline]
    pub fn ray(&self, x: usize, y: usize) -> (&Vector3<f64>, &RayPlanes) {
        let i = y * self.width + x;
        (&self.dirs[i], &self.planes[i])
    }
}

/// Angular size of one ERP pixel along the equator.
pub fn pixel_angle(width: usize) -> f64 {
    TAU / width as f64
}

pub(crate) const HALF_PI: f64 = FRAC_PI_2;

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn center_pixel_looks_down_negative_z() {
        for (w, h) in [(256, 128), (64, 32), (10, 6)] {
            let p = PixelCoord::new(w as f64 / 2.0 - 0.5, h as f64 / 2.0 - 0.5, w, h);
            let s = pixel_to_dir(p);
            assert_abs_diff_eq!(s.phi, 0.0, epsilon = 1e-15);
            assert_abs_diff_eq!(s.theta, 0.0, epsilon = 1e-15);
            assert_abs_diff_eq!((s.dir - Vector3::new(0.0, 0.0, -1.0)).norm(), 0.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn quarter_turn_points_along_x() {
        let (w, h) = (256, 128);
        let s = pixel_to_dir(PixelCoord::new(0.75 * w as f64 - 0.5, h as f64 / 2.0 - 0.5, w, h));
        assert_abs_diff_eq!(s.phi, FRAC_PI_2, epsilon = 1e-15);
        assert_abs_diff_eq!((s.dir - Vector3::new(1.0, 0.0, 0.0)).norm(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn dir_to_pixel_center_and_pole() {
        let p = dir_to_pixel(&Vector3::new(0.0, 0.0, -1.0), 256, 128);
        assert_eq!((p.px, p.py), (127.5, 63.5));
        let pole = dir_to_pixel(&Vector3::new(0.0, 1.0, 0.0), 256, 128);
        assert_eq!(pole.py, 127.5);
        assert_eq!(pole.px, 127.5);
        let south = dir_to_pixel(&Vector3::new(0.0, -1.0, 0.0), 256, 128);
        assert_eq!(south.py, -0.5);
    }

    #[test]
    fn grid_roundtrip() {
        let (w, h) = (256, 128);
        let mut max_err: f64 = 0.0;
        for y in 0..h {
            for x in 0..w {
                let s = pixel_to_dir(PixelCoord::center(x, y, w, h));
                let p = dir_to_pixel(&s.dir, w, h);
                max_err = max_err.max((p.px - x as f64).abs()).max((p.py - y as f64).abs());
            }
        }
        assert!(max_err < 1e-9, "max roundtrip error {max_err}");
    }

    #[test]
    fn hand_evaluated_planes_at_center() {
        let rp = ray_planes(PixelCoord::new(127.5, 63.5, 256, 128));
        assert_abs_diff_eq!((rp.nx - Vector3::new(1.0, 0.0, 0.0)).norm(), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!((rp.ny - Vector3::new(0.0, -1.0, 0.0)).norm(), 0.0, epsilon = 1e-15);
        assert_eq!(rp.pi_x()[3], 0.0);
        assert_eq!(rp.pi_y()[3], 0.0);
    }

    #[test]
    fn near_pole_planes_stay_unit() {
        let (w, h) = (1024, 512);
        for &py in &[0.0, 1.0, (h - 2) as f64, (h - 1) as f64] {
            for x in (0..w).step_by(37) {
                let s = pixel_to_dir(PixelCoord::new(x as f64, py, w, h));
                let rp = ray_planes_for(&s);
                assert!(rp.ny.iter().all(|v| v.is_finite()));
                assert!((rp.ny.norm() - 1.0).abs() < 1e-9);
                assert!(rp.nx.dot(&s.dir).abs() < 1e-10);
                assert!(rp.ny.dot(&s.dir).abs() < 1e-10);
            }
        }
        // Direct construction a hair away from the pole.
        let s = SphericalDir { phi: 0.3, theta: HALF_PI - 1e-6, dir: angles_to_dir(0.3, HALF_PI - 1e-6) };
        let rp = ray_planes_for(&s);
        assert!((rp.ny.norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn random_unit_vectors_roundtrip() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let (w, h) = (256, 128);
        for _ in 0..1000 {
            let v = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            if v.norm() < 1e-3 {
                continue;
            }
            let d = v.normalize();
            let p = dir_to_pixel(&d, w, h);
            let back = pixel_to_dir(p).dir;
            assert!((back - d).norm() < 1e-9, "{d:?} -> {back:?}");
        }
    }

    proptest! {
        #[test]
        fn triad_is_orthonormal_and_right_handed(px in 0.0f64..512.0, py in 0.0f64..256.0) {
            let s = pixel_to_dir(PixelCoord::new(px, py, 512, 256));
            let rp = ray_planes_for(&s);
            prop_assert!((s.dir.norm() - 1.0).abs() < 1e-12);
            prop_assert!((rp.nx.norm() - 1.0).abs() < 1e-12);
            prop_assert!((rp.ny.norm() - 1.0).abs() < 1e-12);
            prop_assert!(rp.nx.dot(&s.dir).abs() < 1e-10);
            prop_assert!(rp.ny.dot(&s.dir).abs() < 1e-10);
            prop_assert!(rp.nx.dot(&rp.ny).abs() < 1e-10);
            prop_assert!((rp.nx.cross(&rp.ny) - s.dir).norm() < 1e-10);
        }

        #[test]
        fn longitude_is_periodic(px in 0.0f64..256.0, py in 0.0f64..128.0) {
            let a = pixel_to_dir(PixelCoord::new(px, py, 256, 128)).dir;
            let b = pixel_to_dir(PixelCoord::new(px + 256.0, py, 256, 128)).dir;
            prop_assert!((a - b).norm() < 1e-12);
        }
    }
}
