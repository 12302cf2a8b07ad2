//! Photometric loss `(1 − λ) L1 + λ (1 − SSIM) / 2`, image metrics, and their gradients.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::image::Image;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct LossConfig {
    pub lambda1: f64,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda1: 0.2, ssim_window: 11, ssim_sigma: 1.5, c1: 0.01 * 0.01, c2: 0.03 * 0.03 }
    }
}

/// Normalized 1-D Gaussian window.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size).map(|i| (-((i as f64 - half).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Mirror index without repeating the edge sample (`-1 → 1`, `n → n − 2`),
/// applied repeatedly for offsets wider than the signal.
#[inline]
pub fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Separable correlation of a `w × h` plane with `k` along both axes.
fn filter(plane: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (j, kv) in k.iter().enumerate() {
                s += kv * plane[y * w + reflect(x as isize + j as isize - r, w)];
            }
            tmp[y * w + x] = s;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (j, kv) in k.iter().enumerate() {
                s += kv * tmp[reflect(y as isize + j as isize - r, h) * w + x];
            }
            out[y * w + x] = s;
        }
    }
    out
}

/// Adjoint of [`filter`].
fn filter_transpose(plane: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let g = plane[y * w + x];
            for (j, kv) in k.iter().enumerate() {
                tmp[reflect(y as isize + j as isize - r, h) * w + x] += kv * g;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let g = tmp[y * w + x];
            for (j, kv) in k.iter().enumerate() {
                out[y * w + reflect(x as isize + j as isize - r, w)] += kv * g;
            }
        }
    }
    out
}

struct SsimPlane {
    mean: f64,
    /// `dSSIM_mean / d a` for this plane (unscaled by the channel count).
    grad: Option<Vec<f64>>,
}

fn ssim_plane(a: &[f64], b: &[f64], w: usize, h: usize, cfg: &LossConfig, want_grad: bool) -> SsimPlane {
    let k = gaussian_window(cfg.ssim_window, cfg.ssim_sigma);
    let sq = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<f64>>();
    let mu_a = filter(a, w, h, &k);
    let mu_b = filter(b, w, h, &k);
    let e_aa = filter(&sq(a, a), w, h, &k);
    let e_bb = filter(&sq(b, b), w, h, &k);
    let e_ab = filter(&sq(a, b), w, h, &k);
    let n = (w * h) as f64;
    let mut total = 0.0;
    let (mut g_mu, mut g_aa, mut g_ab) = if want_grad {
        (vec![0.0; w * h], vec![0.0; w * h], vec![0.0; w * h])
    } else {
        (vec![], vec![], vec![])
    };
    for p in 0..w * h {
        let (ma, mb) = (mu_a[p], mu_b[p]);
        let saa = e_aa[p] - ma * ma;
        let sbb = e_bb[p] - mb * mb;
        let sab = e_ab[p] - ma * mb;
        let n1 = 2.0 * ma * mb + cfg.c1;
        let n2 = 2.0 * sab + cfg.c2;
        let d1 = ma * ma + mb * mb + cfg.c1;
        let d2 = saa + sbb + cfg.c2;
        let s = (n1 * n2) / (d1 * d2);
        total += s;
        if want_grad {
            let ds_dma = 2.0 * mb * n2 / (d1 * d2) - s * 2.0 * ma / d1;
            let ds_dsab = 2.0 * n1 / (d1 * d2);
            let ds_dsaa = -s / d2;
            g_aa[p] = ds_dsaa / n;
            g_ab[p] = ds_dsab / n;
            g_mu[p] = (ds_dma - 2.0 * ma * ds_dsaa - mb * ds_dsab) / n;
        }
    }
    let grad = want_grad.then(|| {
        let t_mu = filter_transpose(&g_mu, w, h, &k);
        let t_aa = filter_transpose(&g_aa, w, h, &k);
        let t_ab = filter_transpose(&g_ab, w, h, &k);
        (0..w * h).map(|p| t_mu[p] + 2.0 * a[p] * t_aa[p] + b[p] * t_ab[p]).collect()
    });
    SsimPlane { mean: total / n, grad }
}

fn planes(img: &Image) -> Vec<Vec<f64>> {
    (0..img.channels).map(|c| img.data.iter().skip(c).step_by(img.channels).copied().collect()).collect()
}

fn ssim_impl(a: &Image, b: &Image, cfg: &LossConfig, want_grad: bool) -> Result<(f64, Option<Image>)> {
    a.ensure_same_shape(b)?;
    let (pa, pb) = (planes(a), planes(b));
    let per: Vec<SsimPlane> =
        (0..a.channels).into_par_iter().map(|c| ssim_plane(&pa[c], &pb[c], a.width, a.height, cfg, want_grad)).collect();
    let nc = a.channels as f64;
    let value = per.iter().map(|p| p.mean).sum::<f64>() / nc;
    let grad = want_grad.then(|| {
        let mut g = Image::new(a.width, a.height, a.channels);
        for (c, p) in per.iter().enumerate() {
            for (k, v) in p.grad.as_ref().expect("requested").iter().enumerate() {
                g.data[k * a.channels + c] = v / nc;
            }
        }
        g
    });
    Ok((value, grad))
}

/// Mean windowed SSIM over pixels and channels.
pub fn ssim(a: &Image, b: &Image, cfg: &LossConfig) -> Result<f64> {
    Ok(ssim_impl(a, b, cfg, false)?.0)
}

/// SSIM and its gradient with respect to `a`.
pub fn ssim_with_grad(a: &Image, b: &Image, cfg: &LossConfig) -> Result<(f64, Image)> {
    let (v, g) = ssim_impl(a, b, cfg, true)?;
    Ok((v, g.expect("requested")))
}

pub fn l1(a: &Image, b: &Image) -> Result<f64> {
    a.ensure_same_shape(b)?;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.data.len() as f64)
}

pub fn loss(pred: &Image, target: &Image, cfg: &LossConfig) -> Result<f64> {
    let l = l1(pred, target)?;
    let s = if cfg.lambda1 > 0.0 { ssim(pred, target, cfg)? } else { 1.0 };
    Ok((1.0 - cfg.lambda1) * l + cfg.lambda1 * (1.0 - s) / 2.0)
}

/// Loss and its gradient with respect to `pred`.
pub fn loss_with_grad(pred: &Image, target: &Image, cfg: &LossConfig) -> Result<(f64, Image)> {
    let l = l1(pred, target)?;
    let n = pred.data.len() as f64;
    let wl1 = 1.0 - cfg.lambda1;
    let mut grad = Image {
        data: pred
            .data
            .iter()
            .zip(&target.data)
            .map(|(p, t)| {
                let d = p - t;
                if d > 0.0 {
                    wl1 / n
                } else if d < 0.0 {
                    -wl1 / n
                } else {
                    0.0
                }
            })
            .collect(),
        ..pred.clone()
    };
    let mut value = wl1 * l;
    if cfg.lambda1 > 0.0 {
        let (s, gs) = ssim_with_grad(pred, target, cfg)?;
        value += cfg.lambda1 * (1.0 - s) / 2.0;
        for (g, v) in grad.data.iter_mut().zip(&gs.data) {
            *g -= cfg.lambda1 * 0.5 * v;
        }
    }
    Ok((value, grad))
}

pub const PSNR_CAP: f64 = 100.0;

/// PSNR in dB on images clamped to `[0, 1]`, capped at 100 dB.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x.clamp(0.0, 1.0) - y.clamp(0.0, 1.0)).powi(2))
        .sum::<f64>()
        / a.data.len() as f64;
    Ok(if mse < 1e-10 { PSNR_CAP } else { -10.0 * mse.log10() })
}
