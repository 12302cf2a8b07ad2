//! Front-to-back alpha compositing of color, expected depth and coverage.

/// One splat's contribution along a ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplatContribution {
    pub gaussian_index: usize,
    pub alpha: f64,
    pub t: f64,
    pub rgb: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompositeParams {
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub transmittance_min: f64,
    pub depth_coverage: f64,
}

impl Default for CompositeParams {
    fn default() -> Self {
        Self { alpha_min: 1.0 / 255.0, alpha_max: 0.999, transmittance_min: 1e-4, depth_coverage: 0.05 }
    }
}

/// Running front-to-back accumulator for one pixel.
#[derive(Debug, Clone, Copy)]
pub struct Compositor {
    pub transmittance: f64,
    pub color: [f64; 3],
    /// `Σ tᵢ αᵢ Tᵢ`
    pub depth_sum: f64,
    /// `Σ αᵢ Tᵢ`
    pub weight_sum: f64,
    pub done: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelResult {
    pub rgb: [f64; 3],
    pub depth: f64,
    pub accum_alpha: f64,
}

impl Default for Compositor {
    fn default() -> Self {
        Self::new()
    }
}

impl Compositor {
    pub fn new() -> Self {
        Self { transmittance: 1.0, color: [0.0; 3], depth_sum: 0.0, weight_sum: 0.0, done: false }
    }

    /// Clamps and gates a raw alpha; `None` when the contribution is discarded.
    #[inline]
    pub fn gate(raw_alpha: f64, p: &CompositeParams) -> Option<(f64, bool)> {
        if raw_alpha < p.alpha_min {
            None
        } else if raw_alpha > p.alpha_max {
            Some((p.alpha_max, true))
        } else {
            Some((raw_alpha, false))
        }
    }

    /// Adds a gated contribution; returns the transmittance in front of it.
    #[inline]
    pub fn push(&mut self, alpha: f64, t: f64, rgb: &[f64; 3], p: &CompositeParams) -> f64 {
        let before = self.transmittance;
        let w = alpha * before;
        for c in 0..3 {
            self.color[c] += w * rgb[c];
        }
        self.depth_sum += w * t;
        self.weight_sum += w;
        self.transmittance = before * (1.0 - alpha);
        if self.transmittance < p.transmittance_min {
            self.done = true;
        }
        before
    }

    pub fn accum_alpha(&self) -> f64 {
        1.0 - self.transmittance
    }

    pub fn depth_active(&self, p: &CompositeParams) -> bool {
        self.accum_alpha() >= p.depth_coverage
    }

    pub fn finish(&self, background: &[f64; 3], d_max: f64, p: &CompositeParams) -> PixelResult {
        let rgb = [0, 1, 2].map(|c| self.color[c] + background[c] * self.transmittance);
        let depth = if self.depth_active(p) { self.depth_sum / self.weight_sum.max(1e-6) } else { d_max };
        PixelResult { rgb, depth, accum_alpha: self.accum_alpha() }
    }
}

/// Composites an already depth-sorted list.
pub fn composite(contribs: &[SplatContribution], background: [f64; 3], d_max: f64, p: &CompositeParams) -> PixelResult {
    let mut comp = Compositor::new();
    for c in contribs {
        if let Some((alpha, _)) = Compositor::gate(c.alpha, p) {
            comp.push(alpha, c.t, &c.rgb, p);
            if comp.done {
                break;
            }
        }
    }
    comp.finish(&background, d_max, p)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(alpha: f64, t: f64, rgb: [f64; 3]) -> SplatContribution {
        SplatContribution { gaussian_index: 0, alpha, t, rgb }
    }

    #[test]
    fn empty_list_is_background() {
        let r = composite(&[], [0.1, 0.2, 0.3], 9.0, &CompositeParams::default());
        assert_eq!(r, PixelResult { rgb: [0.1, 0.2, 0.3], depth: 9.0, accum_alpha: 0.0 });
    }

    #[test]
    fn single_opaque_contribution_is_clamped() {
        let bg = [0.2, 0.4, 0.6];
        let r = composite(&[c(1.0, 2.0, [1.0, 0.5, 0.0])], bg, 9.0, &CompositeParams::default());
        for ch in 0..3 {
            let want = 0.999 * [1.0, 0.5, 0.0][ch] + 0.001 * bg[ch];
            assert!((r.rgb[ch] - want).abs() < 1e-15);
        }
        assert!((r.depth - 2.0).abs() < 1e-15);
        assert!((r.accum_alpha - 0.999).abs() < 1e-15);
    }

    #[test]
    fn two_half_alphas_expand() {
        let (c1, c2, bg) = ([1.0, 0.0, 0.2], [0.0, 1.0, 0.4], [0.3, 0.3, 0.3]);
        let r = composite(&[c(0.5, 1.0, c1), c(0.5, 3.0, c2)], bg, 9.0, &CompositeParams::default());
        for ch in 0..3 {
            let want = 0.5 * c1[ch] + 0.25 * c2[ch] + 0.25 * bg[ch];
            assert!((r.rgb[ch] - want).abs() < 1e-15);
        }
        assert!((r.depth - (0.5 * 1.0 + 0.25 * 3.0) / 0.75).abs() < 1e-15);
        assert!((r.accum_alpha - 0.75).abs() < 1e-15);
    }

    #[test]
    fn low_coverage_uses_far_depth_and_faint_alphas_drop() {
        let p = CompositeParams::default();
        let r = composite(&[c(0.03, 1.0, [1.0; 3])], [0.0; 3], 7.0, &p);
        assert_eq!(r.depth, 7.0);
        let r = composite(&[c(0.5 / 255.0, 1.0, [1.0; 3])], [0.0; 3], 7.0, &p);
        assert_eq!(r.accum_alpha, 0.0);
    }
}
