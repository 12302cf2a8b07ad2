//! Underwater image formation `I = J ⊙ A + B` with learned, depth-driven
//! backscatter and view-conditioned attenuation heads.
//!
//! Backscatter per channel:
//! `B = B∞ (1 − e^{−β_b}) + B_res e^{−β_r}` with `β_{b,r} = softplus(w D + b)`.
//!
//! Attenuation: `P` candidates `a_k = σ(w_k · (D ⊕ e) + b_k)` are fused into
//! `β^D = Σ λ_k a_k`, and `A = σ(exp(−β^D D))`, shared by all channels.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::image::Image;
use crate::scene::{logit, sigmoid};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct MediumConfig {
    /// Number of attenuation candidates `P`.
    pub candidates: usize,
    pub init_waterlight: f64,
    pub init_residual: f64,
    /// Standard deviation of the initial attenuation weights.
    pub init_weight_std: f64,
}

impl Default for MediumConfig {
    fn default() -> Self {
        Self { candidates: 4, init_waterlight: 0.05, init_residual: 0.05, init_weight_std: 0.1 }
    }
}

pub const BACKSCATTER_PARAM_COUNT: usize = 18;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackscatterParams {
    pub wb: [f64; 3],
    pub bb: [f64; 3],
    pub wr: [f64; 3],
    pub br: [f64; 3],
    pub raw_binf: [f64; 3],
    pub raw_bres: [f64; 3],
}

impl BackscatterParams {
    pub fn new(init_waterlight: f64, init_residual: f64) -> Self {
        Self {
            wb: [0.0; 3],
            bb: [0.0; 3],
            wr: [0.0; 3],
            br: [0.0; 3],
            raw_binf: [logit(init_waterlight); 3],
            raw_bres: [logit(init_residual); 3],
        }
    }

    pub fn b_inf(&self) -> [f64; 3] {
        self.raw_binf.map(sigmoid)
    }

    pub fn b_res(&self) -> [f64; 3] {
        self.raw_bres.map(sigmoid)
    }

    /// `wb, bb, wr, br, raw_Binf, raw_Bres`.
    pub fn to_flat(&self) -> Vec<f64> {
        [self.wb, self.bb, self.wr, self.br, self.raw_binf, self.raw_bres].concat()
    }

    pub fn from_flat(v: &[f64]) -> Self {
        assert_eq!(v.len(), BACKSCATTER_PARAM_COUNT);
        let g = |k: usize| [v[3 * k], v[3 * k + 1], v[3 * k + 2]];
        Self { wb: g(0), bb: g(1), wr: g(2), br: g(3), raw_binf: g(4), raw_bres: g(5) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttenuationParams {
    pub candidates: usize,
    pub embed_dim: usize,
    /// `P × (1 + E)` row-major; column 0 multiplies depth.
    pub wa: Vec<f64>,
    pub ba: Vec<f64>,
    pub lambda: Vec<f64>,
}

impl AttenuationParams {
    pub fn zeros(candidates: usize, embed_dim: usize) -> Self {
        Self {
            candidates,
            embed_dim,
            wa: vec![0.0; candidates * (1 + embed_dim)],
            ba: vec![0.0; candidates],
            lambda: vec![1.0 / candidates as f64; candidates],
        }
    }

    pub fn new(candidates: usize, embed_dim: usize, weight_std: f64, seed: u64) -> Self {
        let mut p = Self::zeros(candidates, embed_dim);
        if weight_std > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, weight_std).expect("finite std");
            for w in &mut p.wa {
                *w = normal.sample(&mut rng);
            }
        }
        p
    }

    pub fn param_count(candidates: usize, embed_dim: usize) -> usize {
        candidates * (1 + embed_dim) + 2 * candidates
    }

    /// `wa, ba, lambda`.
    pub fn to_flat(&self) -> Vec<f64> {
        [self.wa.as_slice(), &self.ba, &self.lambda].concat()
    }

    pub fn set_flat(&mut self, v: &[f64]) {
        let nw = self.wa.len();
        let p = self.candidates;
        assert_eq!(v.len(), nw + 2 * p);
        self.wa.copy_from_slice(&v[..nw]);
        self.ba.copy_from_slice(&v[nw..nw + p]);
        self.lambda.copy_from_slice(&v[nw + p..]);
    }

    /// Fused `β^D` at one pixel, with the candidate activations.
    fn beta(&self, depth: f64, e_view: &[f64]) -> (f64, Vec<f64>) {
        let stride = 1 + self.embed_dim;
        let mut acts = Vec::with_capacity(self.candidates);
        let mut beta = 0.0;
        for k in 0..self.candidates {
            let w = &self.wa[k * stride..(k + 1) * stride];
            let z = w[0] * depth + w[1..].iter().zip(e_view).map(|(a, b)| a * b).sum::<f64>() + self.ba[k];
            let a = sigmoid(z);
            beta += self.lambda[k] * a;
            acts.push(a);
        }
        (beta, acts)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Medium {
    pub backscatter: BackscatterParams,
    pub attenuation: AttenuationParams,
}

impl Medium {
    pub fn new(cfg: &MediumConfig, embed_dim: usize, seed: u64) -> Self {
        Self {
            backscatter: BackscatterParams::new(cfg.init_waterlight, cfg.init_residual),
            attenuation: AttenuationParams::new(cfg.candidates, embed_dim, cfg.init_weight_std, seed),
        }
    }
}

/// Attenuation and backscatter maps of one view, 3 channels each.
#[derive(Debug, Clone, PartialEq)]
pub struct MediumMaps {
    pub a: Image,
    pub b: Image,
}

#[inline]
pub fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else {
        z.exp().ln_1p()
    }
}

fn backscatter_pixel(d: f64, p: &BackscatterParams, binf: &[f64; 3], bres: &[f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|c| {
        let beta_b = softplus(p.wb[c] * d + p.bb[c]);
        let beta_r = softplus(p.wr[c] * d + p.br[c]);
        binf[c] * (1.0 - (-beta_b).exp()) + bres[c] * (-beta_r).exp()
    })
}

fn attenuation_pixel(d: f64, e_view: &[f64], p: &AttenuationParams) -> f64 {
    let (beta, _) = p.beta(d, e_view);
    sigmoid((-beta * d).exp())
}

pub fn backscatter(depth: &Image, p: &BackscatterParams) -> Image {
    let (binf, bres) = (p.b_inf(), p.b_res());
    let data = depth.data.par_iter().flat_map_iter(|&d| backscatter_pixel(d, p, &binf, &bres)).collect();
    Image { width: depth.width, height: depth.height, channels: 3, data }
}

pub fn attenuation(depth: &Image, e_view: &[f64], p: &AttenuationParams) -> Image {
    let data = depth
        .data
        .par_iter()
        .flat_map_iter(|&d| {
            let a = attenuation_pixel(d, e_view, p);
            [a, a, a]
        })
        .collect();
    Image { width: depth.width, height: depth.height, channels: 3, data }
}

pub fn medium_maps(depth: &Image, e_view: &[f64], medium: &Medium) -> MediumMaps {
    MediumMaps { a: attenuation(depth, e_view, &medium.attenuation), b: backscatter(depth, &medium.backscatter) }
}

/// `I = J ⊙ A + B`, unclamped.
pub fn compose_uifm(j: &Image, a: &Image, b: &Image) -> Result<Image> {
    j.ensure_same_shape(a)?;
    j.ensure_same_shape(b)?;
    let data = j.data.iter().zip(&a.data).zip(&b.data).map(|((j, a), b)| j * a + b).collect();
    Ok(Image { data, ..*j })
}

/// Textbook degradation: `A = e^{−β^D D}`, `B = B∞ (1 − e^{−β^B D})`.
pub fn simulate_uifm_gt(j_gt: &Image, d_gt: &Image, beta_d: [f64; 3], beta_b: [f64; 3], b_inf: [f64; 3]) -> Image {
    assert_eq!(j_gt.channels, 3);
    assert_eq!(d_gt.channels, 1);
    assert_eq!((j_gt.width, j_gt.height), (d_gt.width, d_gt.height));
    Image::from_fn(j_gt.width, j_gt.height, 3, |x, y, c| {
        let d = d_gt.get(x, y, 0);
        let a = (-beta_d[c] * d).exp();
        let b = b_inf[c] * (1.0 - (-beta_b[c] * d).exp());
        j_gt.get(x, y, c) * a + b
    })
}

/// Gradients of [`compose_uifm`] after the medium heads, in flat layouts.
#[derive(Debug, Clone, PartialEq)]
pub struct MediumGrads {
    pub backscatter: Vec<f64>,
    pub attenuation: Vec<f64>,
    pub d_j: Image,
    pub d_depth: Image,
    pub d_e_view: Vec<f64>,
}

/// Backpropagates `dL/dI` through `I = J ⊙ A(D, e) + B(D)`.
pub fn compose_backward(depth: &Image, e_view: &[f64], j: &Image, medium: &Medium, d_i: &Image) -> MediumGrads {
    let bs = &medium.backscatter;
    let at = &medium.attenuation;
    let (binf, bres) = (bs.b_inf(), bs.b_res());
    let (w, h) = (depth.width, depth.height);
    let n_att = at.to_flat().len();
    let stride = 1 + at.embed_dim;
    let p = at.candidates;

    struct Row {
        bs: [f64; BACKSCATTER_PARAM_COUNT],
        att: Vec<f64>,
        e: Vec<f64>,
        d_j: Vec<f64>,
        d_d: Vec<f64>,
    }

    let rows: Vec<Row> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut r = Row {
                bs: [0.0; BACKSCATTER_PARAM_COUNT],
                att: vec![0.0; n_att],
                e: vec![0.0; at.embed_dim],
                d_j: Vec::with_capacity(3 * w),
                d_d: Vec::with_capacity(w),
            };
            for x in 0..w {
                let d = depth.get(x, y, 0);
                let gi = d_i.pixel(x, y);
                let jv = j.pixel(x, y);
                let mut d_d = 0.0;

                let (beta, acts) = at.beta(d, e_view);
                let ex = (-beta * d).exp();
                let a = sigmoid(ex);
                let mut d_a = 0.0;
                for c in 0..3 {
                    r.d_j.push(gi[c] * a);
                    d_a += gi[c] * jv[c];
                }
                let d_y = -d_a * a * (1.0 - a) * ex;
                let d_beta = d_y * d;
                d_d += d_y * beta;
                for k in 0..p {
                    r.att[p * stride + p + k] += d_beta * acts[k];
                    let dz = d_beta * at.lambda[k] * acts[k] * (1.0 - acts[k]);
                    let wk = &at.wa[k * stride..(k + 1) * stride];
                    r.att[k * stride] += dz * d;
                    for (jj, ev) in e_view.iter().enumerate() {
                        r.att[k * stride + 1 + jj] += dz * ev;
                        r.e[jj] += dz * wk[1 + jj];
                    }
                    r.att[p * stride + k] += dz;
                    d_d += dz * wk[0];
                }

                for c in 0..3 {
                    let g = gi[c];
                    let zb = bs.wb[c] * d + bs.bb[c];
                    let zr = bs.wr[c] * d + bs.br[c];
                    let eb = (-softplus(zb)).exp();
                    let er = (-softplus(zr)).exp();
                    r.bs[12 + c] += g * (1.0 - eb) * binf[c] * (1.0 - binf[c]);
                    r.bs[15 + c] += g * er * bres[c] * (1.0 - bres[c]);
                    let dzb = g * binf[c] * eb * sigmoid(zb);
                    let dzr = -g * bres[c] * er * sigmoid(zr);
                    r.bs[c] += dzb * d;
                    r.bs[3 + c] += dzb;
                    r.bs[6 + c] += dzr * d;
                    r.bs[9 + c] += dzr;
                    d_d += dzb * bs.wb[c] + dzr * bs.wr[c];
                }
                r.d_d.push(d_d);
            }
            r
        })
        .collect();

    let mut out = MediumGrads {
        backscatter: vec![0.0; BACKSCATTER_PARAM_COUNT],
        attenuation: vec![0.0; n_att],
        d_j: Image::new(w, h, 3),
        d_depth: Image::new(w, h, 1),
        d_e_view: vec![0.0; at.embed_dim],
    };
    for (y, r) in rows.into_iter().enumerate() {
        for (a, b) in out.backscatter.iter_mut().zip(&r.bs) {
            *a += b;
        }
        for (a, b) in out.attenuation.iter_mut().zip(&r.att) {
            *a += b;
        }
        for (a, b) in out.d_e_view.iter_mut().zip(&r.e) {
            *a += b;
        }
        out.d_j.data[y * w * 3..(y + 1) * w * 3].copy_from_slice(&r.d_j);
        out.d_depth.data[y * w..(y + 1) * w].copy_from_slice(&r.d_d);
    }
    out
}
