//! Smoothed, truncated and localized versions of the payoffs.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::coeffs::{norm, CostFn, PayoffFn};
use crate::error::{Error, Result};
use crate::game::GameSpec;

/// Unnormalized bump `exp(-1 / (1 - r^2))` on the unit ball.
pub fn bump(r: f64) -> f64 {
    if r >= 1.0 {
        0.0
    } else {
        (-1.0 / (1.0 - r * r)).exp()
    }
}

fn smooth_step(s: f64) -> f64 {
    if s <= 0.0 {
        0.0
    } else {
        (-1.0 / s).exp()
    }
}

/// Smooth radial cutoff: 1 for `r <= outer - band`, 0 for `r >= outer`.
pub fn cutoff(r: f64, outer: f64, band: f64) -> f64 {
    let a = smooth_step(outer - r);
    let b = smooth_step(r - (outer - band));
    if a == 0.0 {
        0.0
    } else {
        a / (a + b)
    }
}

/// Midpoint lattice on `[-radius, radius]^d` with bump weights summing to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadrature {
    pub dim: usize,
    pub offsets: Vec<f64>,
    pub weights: Vec<f64>,
    /// Raw Riemann sum of the bump before normalization, in units of `radius^d`.
    pub raw_mass: f64,
}

impl Quadrature {
    pub fn new(dim: usize, radius: f64, per_dim: usize) -> Self {
        let h = 2.0 / per_dim as f64;
        let axis: Vec<f64> = (0..per_dim).map(|q| -1.0 + (q as f64 + 0.5) * h).collect();
        let mut offsets = Vec::new();
        let mut weights = Vec::new();
        let mut idx = vec![0usize; dim];
        let mut y = vec![0.0; dim];
        loop {
            for (k, &q) in idx.iter().enumerate() {
                y[k] = axis[q];
            }
            let w = bump(norm(&y));
            if w > 0.0 {
                offsets.extend(y.iter().map(|v| v * radius));
                weights.push(w);
            }
            let mut k = 0;
            while k < dim {
                idx[k] += 1;
                if idx[k] < per_dim {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
            if k == dim {
                break;
            }
        }
        let total: f64 = weights.iter().sum();
        let raw_mass = total * h.powi(dim as i32);
        weights.iter_mut().for_each(|w| *w /= total);
        Self { dim, offsets, weights, raw_mass }
    }

    pub fn offset(&self, q: usize) -> &[f64] {
        &self.offsets[q * self.dim..(q + 1) * self.dim]
    }
}

fn default_resolution(dim: usize) -> usize {
    match dim {
        1 => 400,
        2 => 48,
        _ => 12,
    }
}

fn default_band() -> f64 {
    1.0
}

/// `chi_k * (zeta_j * (g ^ m))` evaluated pointwise by quadrature.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MollifiedField {
    pub base: PayoffFn,
    pub j: u32,
    pub k: u32,
    pub m: f64,
    /// Width of the cutoff transition `[k - band, k]`.
    #[serde(default = "default_band")]
    pub band: f64,
    #[serde(default)]
    pub resolution: Option<usize>,
    #[serde(skip)]
    quad: OnceLock<Quadrature>,
}

impl PartialEq for MollifiedField {
    fn eq(&self, o: &Self) -> bool {
        self.base == o.base
            && self.j == o.j
            && self.k == o.k
            && self.m == o.m
            && self.band == o.band
            && self.resolution == o.resolution
    }
}

impl MollifiedField {
    pub fn new(base: PayoffFn, j: u32, k: u32, m: f64, band: f64) -> Self {
        Self { base, j, k, m, band, resolution: None, quad: OnceLock::new() }
    }

    pub fn quadrature(&self, dim: usize) -> &Quadrature {
        self.quad.get_or_init(|| {
            Quadrature::new(dim, 1.0 / self.j as f64, self.resolution.unwrap_or_else(|| default_resolution(dim)))
        })
    }

    /// `zeta_j * (g ^ m)` without the cutoff.
    pub fn smoothed(&self, t: f64, x: &[f64]) -> f64 {
        let q = self.quadrature(x.len());
        let mut y = vec![0.0; x.len()];
        let mut acc = 0.0;
        for (n, w) in q.weights.iter().enumerate() {
            for (i, o) in q.offset(n).iter().enumerate() {
                y[i] = x[i] - o;
            }
            acc += w * self.base.eval(t, &y).min(self.m);
        }
        acc
    }

    pub fn eval(&self, t: f64, x: &[f64]) -> f64 {
        let chi = cutoff(norm(x), self.k as f64, self.band);
        if chi == 0.0 {
            0.0
        } else {
            chi * self.smoothed(t, x)
        }
    }
}

/// `f ^ m` smoothed in time with constant extension outside `[0, T]`,
/// floored at `floor`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MollifiedCost {
    pub base: CostFn,
    pub j: u32,
    pub m: f64,
    pub horizon: f64,
    pub floor: f64,
    #[serde(skip)]
    quad: OnceLock<Quadrature>,
}

impl PartialEq for MollifiedCost {
    fn eq(&self, o: &Self) -> bool {
        self.base == o.base && self.j == o.j && self.m == o.m && self.horizon == o.horizon && self.floor == o.floor
    }
}

impl MollifiedCost {
    pub fn new(base: CostFn, j: u32, m: f64, horizon: f64) -> Self {
        let floor = base.eval(horizon).min(base.eval(0.0)).min(m);
        Self { base, j, m, horizon, floor, quad: OnceLock::new() }
    }

    pub fn eval(&self, t: f64) -> f64 {
        let q = self.quad.get_or_init(|| Quadrature::new(1, 1.0 / self.j as f64, default_resolution(1)));
        let mut acc = 0.0;
        for (n, w) in q.weights.iter().enumerate() {
            let s = (t - q.offsets[n]).clamp(0.0, self.horizon);
            acc += w * self.base.eval(s).min(self.m);
        }
        acc.max(self.floor)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MollifiedPayoffs {
    pub j: u32,
    pub k: u32,
    pub m: f64,
    pub band: f64,
    pub f: CostFn,
    pub g: PayoffFn,
    pub h: PayoffFn,
    /// Worst `|grad g_jkm| / f_jkm` seen by the compatibility scan.
    pub compatibility_ratio: f64,
}

impl MollifiedPayoffs {
    /// The game with its payoffs replaced by the approximants.
    pub fn apply_to(&self, spec: &GameSpec) -> GameSpec {
        let mut s = spec.clone();
        s.payoffs.f = self.f.clone();
        s.payoffs.g = self.g.clone();
        s.payoffs.h = self.h.clone();
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MollifyOptions {
    pub band: f64,
    /// Double the cutoff band until the compatibility scan passes.
    pub widen_on_failure: bool,
    pub compat_tol: f64,
}

impl Default for MollifyOptions {
    fn default() -> Self {
        Self { band: 1.0, widen_on_failure: false, compat_tol: 1e-3 }
    }
}

fn wrap(base: &PayoffFn, j: u32, k: u32, m: f64, band: f64) -> PayoffFn {
    if base.is_zero() {
        PayoffFn::Zero
    } else {
        PayoffFn::Mollified(Box::new(MollifiedField::new(base.clone(), j, k, m, band)))
    }
}

/// Scan `|grad g| / f(0)` along the first axis over `[-k, k]` by central
/// differences.
fn compatibility_ratio(g: &PayoffFn, f: &CostFn, d: usize, k: u32) -> f64 {
    let n = 400;
    let step = 1e-5;
    let mut worst: f64 = 0.0;
    let f0 = f.eval(0.0);
    let mut x = vec![0.0; d];
    for q in 0..=n {
        x[0] = -(k as f64) + 2.0 * k as f64 * q as f64 / n as f64;
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[0] += step;
        xm[0] -= step;
        let slope = (g.eval(0.0, &xp) - g.eval(0.0, &xm)) / (2.0 * step);
        worst = worst.max(slope.abs() / f0);
    }
    worst
}

pub fn mollify_payoffs(spec: &GameSpec, j: u32, k: u32, m: f64) -> Result<MollifiedPayoffs> {
    mollify_payoffs_with(spec, j, k, m, MollifyOptions::default())
}

pub fn mollify_payoffs_with(spec: &GameSpec, j: u32, k: u32, m: f64, opts: MollifyOptions) -> Result<MollifiedPayoffs> {
    if j < 1 || k < 1 {
        return Err(Error::Config("mollification indices j and k must be >= 1".into()));
    }
    if !(m > 0.0 && m.is_finite()) {
        return Err(Error::Config(format!("truncation level m must be positive, got {m}")));
    }
    if (k as f64) <= 1.0 / j as f64 {
        return Err(Error::Config(format!("cutoff radius {k} is not larger than the mollifier radius 1/{j}")));
    }
    if !(opts.band > 0.0 && opts.band <= k as f64) {
        return Err(Error::Config("cutoff band must lie in (0, k]".into()));
    }
    let f = CostFn::Mollified(Box::new(MollifiedCost::new(spec.payoffs.f.clone(), j, m, spec.horizon)));
    let mut band = opts.band;
    loop {
        let g = wrap(&spec.payoffs.g, j, k, m, band);
        let h = wrap(&spec.payoffs.h, j, k, m, band);
        let ratio = compatibility_ratio(&g, &f, spec.d(), k);
        let ok = ratio <= 1.0 + opts.compat_tol;
        if ok || !opts.widen_on_failure || band >= k as f64 {
            return Ok(MollifiedPayoffs { j, k, m, band, f, g, h, compatibility_ratio: ratio });
        }
        band = (2.0 * band).min(k as f64);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::tests::still_spec;

    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    }

    #[test]
    fn weights_normalized_and_mass_matches_integral() {
        let q = Quadrature::new(1, 0.25, 400);
        assert!((q.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let exact = simpson(bump, -1.0, 1.0, 20_000);
        assert!((q.raw_mass - exact).abs() < 1e-6, "{} {}", q.raw_mass, exact);
        let q2 = Quadrature::new(2, 0.5, 48);
        assert!((q2.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cutoff_shape() {
        assert_eq!(cutoff(0.0, 4.0, 1.0), 1.0);
        assert_eq!(cutoff(3.0, 4.0, 1.0), 1.0);
        assert_eq!(cutoff(4.0, 4.0, 1.0), 0.0);
        let mid = cutoff(3.5, 4.0, 1.0);
        assert!((mid - 0.5).abs() < 1e-12);
        assert!(cutoff(3.2, 4.0, 1.0) > cutoff(3.7, 4.0, 1.0));
    }

    #[test]
    fn constant_is_preserved_inside_cutoff() {
        let m = MollifiedField::new(PayoffFn::Constant { value: 0.4 }, 3, 5, 10.0, 1.0);
        for x in [-3.9, 0.0, 2.5] {
            assert!((m.eval(0.0, &[x]) - 0.4).abs() < 1e-12);
        }
        assert_eq!(m.eval(0.0, &[5.0]), 0.0);
    }

    #[test]
    fn truncation_caps_values() {
        let m = MollifiedField::new(PayoffFn::Constant { value: 6.0 }, 2, 4, 3.0, 1.0);
        for x in [-2.9, 0.0, 1.3] {
            assert!(m.eval(0.0, &[x]) <= 3.0 + 1e-12);
        }
    }

    #[test]
    fn abs_gradient_stays_bounded() {
        let spec = still_spec(PayoffFn::Abs { scale: 1.0, center: None }, PayoffFn::Zero, 0.0, 1.0);
        let mp = mollify_payoffs(&spec, 4, 5, 10.0).unwrap();
        let h = 1e-3;
        for q in 0..8000 {
            let x = -4.0 + q as f64 * h;
            let s = (mp.g.eval(0.0, &[x + h]) - mp.g.eval(0.0, &[x])) / h;
            assert!(s.abs() <= 1.0 + 1e-3, "{x} {s}");
        }
    }

    #[test]
    fn cost_is_floored_and_preserved() {
        let f = MollifiedCost::new(CostFn::Constant { value: 0.5 }, 3, 10.0, 1.0);
        assert!((f.eval(0.3) - 0.5).abs() < 1e-12);
        let f = MollifiedCost::new(CostFn::Linear { initial: 2.0, slope: 1.0 }, 3, 10.0, 1.0);
        assert!(f.eval(1.0) >= 1.0);
        assert!(f.eval(0.0) <= 2.0 && f.eval(0.0) > f.eval(1.0));
    }

    #[test]
    fn rejects_bad_indices() {
        let spec = still_spec(PayoffFn::Zero, PayoffFn::Zero, 0.0, 1.0);
        assert!(mollify_payoffs(&spec, 1, 1, 1.0).is_err());
        assert!(mollify_payoffs(&spec, 2, 3, 0.0).is_err());
        assert!(mollify_payoffs(&spec, 0, 3, 1.0).is_err());
    }

    #[test]
    fn widening_repairs_steep_cutoff() {
        // a narrow band makes the cutoff slope exceed f = 1
        let spec = still_spec(PayoffFn::Constant { value: 1.5 }, PayoffFn::Zero, 0.0, 1.0);
        let narrow = MollifyOptions { band: 0.5, ..Default::default() };
        let mp = mollify_payoffs_with(&spec, 2, 8, 1.5, narrow).unwrap();
        assert!(mp.compatibility_ratio > 1.0);
        let wide = MollifyOptions { widen_on_failure: true, ..narrow };
        let mp = mollify_payoffs_with(&spec, 2, 8, 1.5, wide).unwrap();
        assert!(mp.compatibility_ratio <= 1.0 + 1e-3, "{}", mp.compatibility_ratio);
        assert!(mp.band > 0.5);
    }
}
