//! Game data, the expected-payoff functional and sampled assumption checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coeffs::{norm, CostFn, DiffusionField, DriftField, PayoffFn};
use crate::control::ControlPath;
use crate::error::{Error, Result};
use crate::sde::CadlagPath;

pub const MAX_STATE_DIM: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileVariant {
    /// Sub-linear growth of `g + h` with exponent `beta < 1`.
    A22Sublinear,
    /// Quadratic growth of `h`, linear growth of `g`.
    A51Quadratic,
    /// Quadratic-growth profile with Lipschitz `h`; no structural condition on sigma.
    A51LipschitzH,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaStructure {
    /// `sigma_ij` depends on `x_i` only.
    SeparableIa,
    /// `|sigma(x)| <= D2 (1 + |x|)^{1/2}`.
    SqrtGrowthIb,
    Neither,
}

/// Declared constants of the standing assumptions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionProfile {
    pub variant: ProfileVariant,
    pub d1: f64,
    #[serde(default)]
    pub d2: Option<f64>,
    pub d3: f64,
    #[serde(default = "default_one")]
    pub k1: f64,
    #[serde(default = "default_one")]
    pub k2: f64,
    #[serde(default = "default_one")]
    pub k5: f64,
    pub sigma_structure: SigmaStructure,
    #[serde(default)]
    pub beta: f64,
}

fn default_one() -> f64 {
    1.0
}

impl AssumptionProfile {
    pub fn check(&self) -> Result<()> {
        if self.variant == ProfileVariant::A22Sublinear && !(0.0..1.0).contains(&self.beta) {
            return Err(Error::Config(format!(
                "profile: sub-linear variant needs beta in [0, 1), got {}",
                self.beta
            )));
        }
        if self.variant == ProfileVariant::A51Quadratic && self.sigma_structure == SigmaStructure::Neither {
            return Err(Error::Config(
                "profile: quadratic variant needs a separable or square-root-growth sigma unless h is Lipschitz".into(),
            ));
        }
        if self.sigma_structure == SigmaStructure::SqrtGrowthIb && self.d2.is_none() {
            return Err(Error::Config("profile: square-root-growth structure needs d2".into()));
        }
        for (name, v) in [("d1", self.d1), ("d3", self.d3), ("k1", self.k1), ("k2", self.k2), ("k5", self.k5)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("profile: {name} must be a finite nonnegative constant")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    /// State dimension `d`.
    pub state: usize,
    /// Noise dimension `d'`.
    pub noise: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Payoffs {
    pub f: CostFn,
    pub g: PayoffFn,
    pub h: PayoffFn,
}

/// A controller-vs-stopper game on `[0, T] x R^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameSpec {
    pub dims: Dims,
    pub horizon: f64,
    pub discount: f64,
    pub drift: DriftField,
    pub diffusion: DiffusionField,
    pub payoffs: Payoffs,
    pub profile: AssumptionProfile,
}

impl GameSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: GameSpec = serde_json::from_str(text)?;
        spec.check()?;
        Ok(spec)
    }

    /// Structural validation: dimensions, signs, and profile consistency.
    pub fn check(&self) -> Result<()> {
        let d = self.dims.state;
        if d == 0 || d > MAX_STATE_DIM || self.dims.noise == 0 {
            return Err(Error::Config(format!(
                "dims: need 1 <= d <= {MAX_STATE_DIM} and d' >= 1, got d = {d}, d' = {}",
                self.dims.noise
            )));
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(Error::Config("horizon must be positive".into()));
        }
        if !(self.discount.is_finite() && self.discount >= 0.0) {
            return Err(Error::Config("discount must be nonnegative".into()));
        }
        self.drift.check(d)?;
        self.diffusion.check(d, self.dims.noise)?;
        self.payoffs.f.check(self.horizon)?;
        self.payoffs.g.check(d, "payoff g")?;
        self.payoffs.h.check(d, "payoff h")?;
        self.profile.check()
    }

    pub fn d(&self) -> usize {
        self.dims.state
    }

    pub fn noise_dim(&self) -> usize {
        self.dims.noise
    }

    pub fn f(&self, t: f64) -> f64 {
        self.payoffs.f.eval(t)
    }

    pub fn g(&self, t: f64, x: &[f64]) -> f64 {
        self.payoffs.g.eval(t, x)
    }

    pub fn h(&self, t: f64, x: &[f64]) -> f64 {
        self.payoffs.h.eval(t, x)
    }

    /// `(sigma sigma^T)(x)`, row-major `d x d`.
    pub fn diffusion_matrix(&self, x: &[f64]) -> Vec<f64> {
        let (d, w) = (self.d(), self.noise_dim());
        let s = self.diffusion.eval_vec(x, w);
        let mut a = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                a[i * d + j] = (0..w).map(|k| s[i * w + k] * s[j * w + k]).sum();
            }
        }
        a
    }
}

/// Discounted cost `int_{(after, upto]} e^{-rs} f(t+s) dnu_s`; `after = None`
/// closes the interval at zero so the time-0 atom is charged.
pub fn stieltjes_cost_range(
    f: &CostFn,
    control: &ControlPath,
    after: Option<usize>,
    upto: usize,
    t: f64,
    r: f64,
) -> Result<f64> {
    if upto > control.grid.n_steps {
        return Err(Error::OffGrid { time: control.grid.time(upto), dt: control.grid.dt });
    }
    let weight = |k: usize| {
        let s = control.grid.time(k);
        (-r * s).exp() * f.eval(t + s)
    };
    let first_node = after.map_or(0, |a| a + 1);
    let mut total = 0.0;
    for &(node, size) in &control.atoms {
        if size < 0.0 {
            return Err(Error::Invariant(format!("negative atom {size} at node {node}")));
        }
        if node >= first_node && node <= upto {
            total += weight(node) * size;
        }
    }
    let first_step = after.map_or(1, |a| a + 1);
    for k in first_step..=upto {
        let inc = control.increments[k];
        if inc < 0.0 {
            return Err(Error::Invariant(format!("negative control increment {inc} on step {k}")));
        }
        if inc > 0.0 {
            total += inc * 0.5 * (weight(k - 1) + weight(k));
        }
    }
    Ok(total)
}

/// Discounted cost of control over the closed interval `[0, tau]`.
pub fn stieltjes_cost(f: &CostFn, control: &ControlPath, tau: f64, t: f64, r: f64) -> Result<f64> {
    let k = control.grid.node_of(tau)?;
    stieltjes_cost_range(f, control, None, k, t, r)
}

/// Pathwise payoff for stopping at node `k`.
pub fn payoff_at_node(spec: &GameSpec, path: &CadlagPath, control: &ControlPath, k: usize, t: f64) -> Result<f64> {
    path.grid.ensure_same(&control.grid, "path vs control")?;
    if k > path.grid.n_steps {
        return Err(Error::OffGrid { time: path.grid.time(k), dt: path.grid.dt });
    }
    let r = spec.discount;
    let dt = path.grid.dt;
    let running = |i: usize| {
        let s = path.grid.time(i);
        (-r * s).exp() * spec.h(t + s, path.value(i))
    };
    let mut integral = 0.0;
    if !spec.payoffs.h.is_zero() && k > 0 {
        let mut prev = running(0);
        for i in 1..=k {
            let cur = running(i);
            integral += 0.5 * dt * (prev + cur);
            prev = cur;
        }
    }
    let s = path.grid.time(k);
    let terminal = (-r * s).exp() * spec.g(t + s, path.value(k));
    let cost = stieltjes_cost_range(&spec.payoffs.f, control, None, k, t, r)?;
    Ok(terminal + integral + cost)
}

/// Pathwise value of the expected-payoff integrand for stopping at `tau`.
pub fn evaluate_payoff(spec: &GameSpec, path: &CadlagPath, control: &ControlPath, tau: f64, t: f64) -> Result<f64> {
    let k = path.grid.node_of(tau)?;
    payoff_at_node(spec, path, control, k, t)
}

/// Outcome of one sampled assumption check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionCheck {
    pub name: String,
    pub estimate: f64,
    pub bound: f64,
    pub pass: bool,
    pub witness: Option<Vec<f64>>,
    pub witness_time: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub conforming: bool,
    pub n_points: usize,
    pub checks: Vec<AssumptionCheck>,
}

impl AssumptionReport {
    pub fn check(&self, name: &str) -> Option<&AssumptionCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

pub const MIN_SAMPLE_POINTS: usize = 100;
const GRADIENT_TOL: f64 = 1e-4;
const LIPSCHITZ_TOL: f64 = 1e-6;
const FD_STEP: f64 = 1e-6;

/// Uniform sample of `n` points in `[-half_width, half_width]^d`, origin first.
pub fn sample_box(d: usize, half_width: f64, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts = vec![vec![0.0; d]];
    while pts.len() < n {
        pts.push((0..d).map(|_| rng.random_range(-half_width..=half_width)).collect());
    }
    pts
}

struct Worst {
    value: f64,
    at: Option<(Vec<f64>, f64)>,
}

impl Worst {
    fn new() -> Self {
        Self { value: 0.0, at: None }
    }
    fn offer(&mut self, value: f64, x: &[f64], t: f64) {
        if self.at.is_none() || value > self.value {
            self.value = value;
            self.at = Some((x.to_vec(), t));
        }
    }
    fn into_check(self, name: &str, bound: f64, pass: bool) -> AssumptionCheck {
        let (witness, witness_time) = match self.at {
            Some((x, t)) => (Some(x), Some(t)),
            None => (None, None),
        };
        AssumptionCheck { name: name.into(), estimate: self.value, bound, pass, witness, witness_time }
    }
}

fn fd_gradient_norm(spec: &GameSpec, t: f64, x: &[f64]) -> f64 {
    let mut y = x.to_vec();
    let mut sq = 0.0;
    for i in 0..x.len() {
        y[i] = x[i] + FD_STEP;
        let up = spec.g(t, &y);
        y[i] = x[i] - FD_STEP;
        let dn = spec.g(t, &y);
        y[i] = x[i];
        let di = (up - dn) / (2.0 * FD_STEP);
        sq += di * di;
    }
    sq.sqrt()
}

fn frob_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
}

/// Estimate the standing-assumption constants on a finite point set.
///
/// Violations are reported in the returned report, never raised; the only
/// error is a sample set smaller than [`MIN_SAMPLE_POINTS`].
pub fn validate_assumptions(spec: &GameSpec, sample_points: &[Vec<f64>]) -> Result<AssumptionReport> {
    if sample_points.len() < MIN_SAMPLE_POINTS {
        return Err(Error::Config(format!(
            "assumption checks need at least {MIN_SAMPLE_POINTS} sample points, got {}",
            sample_points.len()
        )));
    }
    if sample_points.iter().any(|p| p.len() != spec.d()) {
        return Err(Error::Config("sample points must have the state dimension".into()));
    }
    let prof = &spec.profile;
    let w = spec.noise_dim();
    let times: Vec<f64> = (0..=10).map(|i| spec.horizon * i as f64 / 10.0).collect();
    let mut checks = Vec::new();

    // f > 0 and non-increasing
    let fine: Vec<f64> = (0..=100).map(|i| spec.horizon * i as f64 / 100.0).collect();
    let f_min = fine.iter().map(|&t| spec.f(t)).fold(f64::INFINITY, f64::min);
    let f_rise = fine.windows(2).map(|p| spec.f(p[1]) - spec.f(p[0])).fold(0.0, f64::max);
    checks.push(AssumptionCheck {
        name: "f_positive".into(),
        estimate: f_min,
        bound: 0.0,
        pass: f_min > 0.0,
        witness: None,
        witness_time: None,
    });
    checks.push(AssumptionCheck {
        name: "f_non_increasing".into(),
        estimate: f_rise,
        bound: 0.0,
        pass: f_rise <= 1e-12,
        witness: None,
        witness_time: None,
    });

    // g, h >= 0
    let mut neg = Worst::new();
    for &t in &times {
        for x in sample_points {
            neg.offer((-spec.g(t, x)).max(-spec.h(t, x)).max(0.0), x, t);
        }
    }
    let pass = neg.value <= 0.0;
    checks.push(neg.into_check("g_h_nonnegative", 0.0, pass));

    // |grad g| <= f
    let mut grad = Worst::new();
    for &t in &times {
        let ft = spec.f(t);
        for x in sample_points {
            grad.offer(fd_gradient_norm(spec, t, x) / ft, x, t);
        }
    }
    let pass = grad.value <= 1.0 + GRADIENT_TOL;
    checks.push(grad.into_check("gradient_ratio", 1.0, pass));

    // g(t, x + y) + f(t)|y| >= g(t, x) on sampled pairs
    let mut compat = Worst::new();
    for &t in &times {
        let ft = spec.f(t);
        for (i, x) in sample_points.iter().enumerate() {
            for y in sample_points.iter().skip(i + 1).take(24) {
                let step = norm(&y.iter().zip(x).map(|(a, b)| a - b).collect::<Vec<_>>());
                let shortfall = spec.g(t, x) - spec.g(t, y) - ft * step;
                compat.offer(shortfall.max(0.0), x, t);
                let back = spec.g(t, y) - spec.g(t, x) - ft * step;
                compat.offer(back.max(0.0), y, t);
            }
        }
    }
    let pass = compat.value <= 1e-9;
    checks.push(compat.into_check("gradient_compatibility", 0.0, pass));

    // Lipschitz quotient of (b, sigma)
    let coeffs: Vec<(Vec<f64>, Vec<f64>)> = sample_points
        .iter()
        .map(|x| (spec.drift.eval_vec(x), spec.diffusion.eval_vec(x, w)))
        .collect();
    let mut lip = Worst::new();
    let mut lin = Worst::new();
    for (i, x) in sample_points.iter().enumerate() {
        let (bx, sx) = &coeffs[i];
        lin.offer((norm(bx) + norm(sx)) / (1.0 + norm(x)), x, 0.0);
        for (j, y) in sample_points.iter().enumerate().skip(i + 1) {
            let dist = frob_diff(x, y);
            if dist < 1e-12 {
                continue;
            }
            let (by, sy) = &coeffs[j];
            lip.offer((frob_diff(bx, by) + frob_diff(sx, sy)) / dist, x, 0.0);
        }
    }
    let pass = lip.value <= prof.d1 * (1.0 + LIPSCHITZ_TOL) + 1e-12;
    checks.push(lip.into_check("lipschitz_d1", prof.d1, pass));
    let pass = lin.value <= prof.d3 * (1.0 + LIPSCHITZ_TOL) + 1e-12;
    checks.push(lin.into_check("linear_growth_d3", prof.d3, pass));

    // sigma structure
    let mut sep = Worst::new();
    for x in sample_points {
        let base = spec.diffusion.eval_vec(x, w);
        for k in 0..spec.d() {
            let mut y = x.clone();
            y[k] += 0.37;
            let moved = spec.diffusion.eval_vec(&y, w);
            for i in (0..spec.d()).filter(|&i| i != k) {
                let change = frob_diff(&base[i * w..(i + 1) * w], &moved[i * w..(i + 1) * w]);
                sep.offer(change, x, 0.0);
            }
        }
    }
    let pass_ia = sep.value <= 1e-12;
    checks.push(sep.into_check("sigma_separable_ia", 0.0, pass_ia));
    let mut sq = Worst::new();
    for x in sample_points {
        sq.offer(norm(&spec.diffusion.eval_vec(x, w)) / (1.0 + norm(x)).sqrt(), x, 0.0);
    }
    let d2 = prof.d2.unwrap_or(f64::INFINITY);
    let pass_ib = sq.value <= d2 * (1.0 + LIPSCHITZ_TOL);
    checks.push(sq.into_check("sigma_sqrt_growth_ib", d2, pass_ib));
    let structure_ok = match prof.sigma_structure {
        SigmaStructure::SeparableIa => pass_ia,
        SigmaStructure::SqrtGrowthIb => pass_ib,
        SigmaStructure::Neither => prof.variant == ProfileVariant::A51LipschitzH,
    };
    checks.push(AssumptionCheck {
        name: "sigma_structure".into(),
        estimate: if structure_ok { 1.0 } else { 0.0 },
        bound: 1.0,
        pass: structure_ok,
        witness: None,
        witness_time: None,
    });

    // growth of the payoffs
    match prof.variant {
        ProfileVariant::A22Sublinear => {
            let mut gr = Worst::new();
            for &t in &times {
                for x in sample_points {
                    let q = (spec.g(t, x) + spec.h(t, x)) / (1.0 + norm(x).powf(prof.beta));
                    gr.offer(q, x, t);
                }
            }
            let pass = gr.value <= prof.k1 * (1.0 + LIPSCHITZ_TOL);
            checks.push(gr.into_check("growth_k1_beta", prof.k1, pass));
        }
        ProfileVariant::A51Quadratic | ProfileVariant::A51LipschitzH => {
            let mut gh = Worst::new();
            let mut gg = Worst::new();
            for &t in &times {
                for x in sample_points {
                    let r = norm(x);
                    gh.offer(spec.h(t, x) / (1.0 + r * r), x, t);
                    gg.offer(spec.g(t, x) / (1.0 + r), x, t);
                }
            }
            let pass = gh.value <= prof.k5 * (1.0 + LIPSCHITZ_TOL);
            checks.push(gh.into_check("growth_h_quadratic_k5", prof.k5, pass));
            let pass = gg.value <= prof.k5 * (1.0 + LIPSCHITZ_TOL);
            checks.push(gg.into_check("growth_g_linear_k5", prof.k5, pass));
            if prof.variant == ProfileVariant::A51LipschitzH {
                let mut lh = Worst::new();
                for &t in &times {
                    for (i, x) in sample_points.iter().enumerate() {
                        for y in sample_points.iter().skip(i + 1).take(24) {
                            let dist = frob_diff(x, y);
                            if dist > 1e-12 {
                                lh.offer((spec.h(t, x) - spec.h(t, y)).abs() / dist, x, t);
                            }
                        }
                    }
                }
                let pass = lh.value <= prof.k5 * (1.0 + LIPSCHITZ_TOL);
                checks.push(lh.into_check("h_lipschitz_k5", prof.k5, pass));
            }
        }
    }

    let conforming = checks.iter().all(|c| c.pass);
    Ok(AssumptionReport { conforming, n_points: sample_points.len(), checks })
}
