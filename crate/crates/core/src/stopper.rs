//! The stopper's hitting-time rules on discrete paths.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::control::ControlPath;
use crate::error::{Error, Result};
use crate::game::{payoff_at_node, GameSpec};
use crate::sde::{CadlagPath, Estimate};

/// A scalar field `(t, x) -> R`, such as an interpolated value function or
/// an obstacle.
pub trait ValueField: Sync {
    fn eval(&self, t: f64, x: &[f64]) -> f64;
}

impl<F> ValueField for F
where
    F: Fn(f64, &[f64]) -> f64 + Sync,
{
    fn eval(&self, t: f64, x: &[f64]) -> f64 {
        self(t, x)
    }
}

/// The obstacle `g` of a game as a field.
pub struct Obstacle<'a>(pub &'a GameSpec);

impl ValueField for Obstacle<'_> {
    fn eval(&self, t: f64, x: &[f64]) -> f64 {
        self.0.g(t, x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StopKind {
    TauStar,
    SigmaStar,
    ThetaStar,
    Fixed { time: f64 },
    Horizon,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StopRule {
    pub kind: StopKind,
    pub contact_tol: f64,
}

/// A stopping node; `horizon_fallback` is set when no contact was seen and
/// the rule defaulted to the horizon.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopTime {
    pub node: usize,
    pub horizon_fallback: bool,
}

fn check_tol(tol: f64) -> Result<()> {
    if tol.is_finite() && tol >= 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("contact tolerance must be finite and >= 0, got {tol}")))
    }
}

fn first_contact<'p>(
    value: &dyn ValueField,
    g: &dyn ValueField,
    path: &'p CadlagPath,
    point: impl Fn(&'p CadlagPath, usize) -> &'p [f64],
    t: f64,
    tol: f64,
) -> Result<StopTime> {
    check_tol(tol)?;
    for k in 0..path.grid.n_nodes() {
        let s = t + path.grid.time(k);
        let x = point(path, k);
        let gap = value.eval(s, x) - g.eval(s, x);
        if gap < -10.0 * tol {
            return Err(Error::Dominance { node: k, gap, tol });
        }
        if gap <= tol {
            return Ok(StopTime { node: k, horizon_fallback: false });
        }
    }
    Ok(StopTime { node: path.grid.n_steps, horizon_fallback: true })
}

/// First node where `value - g <= tol` at the right limit `X_s`.
pub fn tau_star(value: &dyn ValueField, g: &dyn ValueField, path: &CadlagPath, t: f64, tol: f64) -> Result<StopTime> {
    first_contact(value, g, path, CadlagPath::value, t, tol)
}

/// First node where `value - g <= tol` at the left limit `X_{s-}`.
pub fn sigma_star(value: &dyn ValueField, g: &dyn ValueField, path: &CadlagPath, t: f64, tol: f64) -> Result<StopTime> {
    first_contact(value, g, path, CadlagPath::pre_value, t, tol)
}

pub fn theta_star(value: &dyn ValueField, g: &dyn ValueField, path: &CadlagPath, t: f64, tol: f64) -> Result<StopTime> {
    let a = tau_star(value, g, path, t, tol)?;
    let b = sigma_star(value, g, path, t, tol)?;
    Ok(if b.node < a.node { b } else { a })
}

impl StopRule {
    pub fn new(kind: StopKind, contact_tol: f64) -> Result<Self> {
        check_tol(contact_tol)?;
        Ok(Self { kind, contact_tol })
    }

    pub fn apply(&self, value: &dyn ValueField, g: &dyn ValueField, path: &CadlagPath, t: f64) -> Result<StopTime> {
        let tol = self.contact_tol;
        match self.kind {
            StopKind::TauStar => tau_star(value, g, path, t, tol),
            StopKind::SigmaStar => sigma_star(value, g, path, t, tol),
            StopKind::ThetaStar => theta_star(value, g, path, t, tol),
            StopKind::Fixed { time } => Ok(StopTime { node: path.grid.node_of(time)?, horizon_fallback: false }),
            StopKind::Horizon => Ok(StopTime { node: path.grid.n_steps, horizon_fallback: false }),
        }
    }
}

/// Per-path stop times and payoffs under each rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StopRecord {
    pub path_id: usize,
    pub tau: f64,
    pub sigma: f64,
    pub theta: f64,
    pub payoff_tau: f64,
    pub payoff_sigma: f64,
    pub payoff_theta: f64,
}

pub fn write_stop_records<W: Write>(records: &[StopRecord], out: &mut W) -> std::io::Result<()> {
    writeln!(out, "path_id,tau_star,sigma_star,theta_star,payoff_tau,payoff_sigma,payoff_theta")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.path_id, r.tau, r.sigma, r.theta, r.payoff_tau, r.payoff_sigma, r.payoff_theta
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GapReport {
    /// Mean and standard error of `payoff(tau*) - payoff(theta*)`.
    pub gap: Estimate,
    /// Paths on which `theta* < tau*`.
    pub n_strict: usize,
    pub records: Vec<StopRecord>,
}

pub fn stop_record(
    spec: &GameSpec,
    value: &dyn ValueField,
    g: &dyn ValueField,
    path: &CadlagPath,
    control: &ControlPath,
    path_id: usize,
    t: f64,
    tol: f64,
) -> Result<StopRecord> {
    let tau = tau_star(value, g, path, t, tol)?.node;
    let sigma = sigma_star(value, g, path, t, tol)?.node;
    let theta = tau.min(sigma);
    let payoff = |k| payoff_at_node(spec, path, control, k, t);
    let time = |k| path.grid.time(k);
    Ok(StopRecord {
        path_id,
        tau: time(tau),
        sigma: time(sigma),
        theta: time(theta),
        payoff_tau: payoff(tau)?,
        payoff_sigma: payoff(sigma)?,
        payoff_theta: payoff(theta)?,
    })
}

/// Monte Carlo comparison of stopping at `theta*` against `tau*`, path `i`
/// driven by `controls[i]`.
///
/// The gap is oriented as `payoff(tau*) - payoff(theta*)`, so a controller
/// jump out of the contact set shows up as a nonnegative mean.
pub fn stop_rule_payoff_gap(
    spec: &GameSpec,
    value: &dyn ValueField,
    g: &dyn ValueField,
    paths: &[CadlagPath],
    controls: &[ControlPath],
    t: f64,
    tol: f64,
) -> Result<GapReport> {
    if paths.len() != controls.len() {
        return Err(Error::Config(format!("{} paths but {} controls", paths.len(), controls.len())));
    }
    let records = paths
        .iter()
        .zip(controls)
        .enumerate()
        .map(|(i, (p, c))| stop_record(spec, value, g, p, c, i, t, tol))
        .collect::<Result<Vec<_>>>()?;
    let gaps: Vec<f64> = records.iter().map(|r| r.payoff_tau - r.payoff_theta).collect();
    let gap = if gaps.len() >= 2 {
        Estimate::from_samples(&gaps)?
    } else {
        Estimate { mean: gaps.first().copied().unwrap_or(0.0), stderr: 0.0, n: gaps.len() }
    };
    let n_strict = records.iter().filter(|r| r.theta < r.tau).count();
    Ok(GapReport { gap, n_strict, records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::{CostFn, DiffusionField, DriftField, PayoffFn};
    use crate::control::{make_control, ControlFamily};
    use crate::grid::TimeGrid;
    use crate::rng::BrownianDriver;
    use crate::sde::simulate_controlled;

    fn spec() -> GameSpec {
        let mut s = crate::game::tests::still_spec(PayoffFn::Put { strike: 1.0, scale: 1.0 }, PayoffFn::Zero, 0.0, 1.0);
        s.diffusion = DiffusionField::Constant { matrix: vec![vec![0.4]] };
        s.payoffs.f = CostFn::Constant { value: 1.0 };
        s
    }

    fn path(spec: &GameSpec, family: ControlFamily, seed: u64) -> (CadlagPath, ControlPath) {
        let grid = TimeGrid::over(spec.horizon, 100).unwrap();
        let driver = BrownianDriver::generate(seed, 0, grid, 1, 1);
        let c = make_control(&family, grid).unwrap();
        (simulate_controlled(spec, &c, &driver, 0.0, &[1.0]).unwrap(), c)
    }

    #[test]
    fn value_equal_to_obstacle_stops_at_zero() {
        let s = spec();
        let (p, _) = path(&s, ControlFamily::Zero, 1);
        let g = Obstacle(&s);
        for f in [tau_star, sigma_star, theta_star] {
            assert_eq!(f(&g, &g, &p, 0.0, 0.0).unwrap(), StopTime { node: 0, horizon_fallback: false });
        }
    }

    #[test]
    fn horizon_contact() {
        let s = spec();
        let (p, _) = path(&s, ControlFamily::Zero, 2);
        let g = Obstacle(&s);
        let v = |t: f64, x: &[f64]| s.g(t, x) + if t < 1.0 - 1e-12 { 1.0 } else { 0.0 };
        let st = tau_star(&v, &g, &p, 0.0, 1e-6).unwrap();
        assert_eq!(st, StopTime { node: 100, horizon_fallback: false });
        let w = |t: f64, x: &[f64]| s.g(t, x) + 1.0;
        assert!(tau_star(&w, &g, &p, 0.0, 1e-6).unwrap().horizon_fallback);
    }

    #[test]
    fn dominance_violation() {
        let s = spec();
        let (p, _) = path(&s, ControlFamily::Zero, 3);
        let g = Obstacle(&s);
        let v = |t: f64, x: &[f64]| s.g(t, x) - 1.0;
        assert!(matches!(tau_star(&v, &g, &p, 0.0, 1e-3), Err(Error::Dominance { node: 0, .. })));
    }

    #[test]
    fn jump_out_of_contact_separates_rules() {
        let s = spec();
        // contact set {x <= 0.5}; path starts at 0.3 and jumps to 1.3 at time 0
        let v = |t: f64, x: &[f64]| s.g(t, x) + (x[0] - 0.5).max(0.0);
        let g = Obstacle(&s);
        let grid = TimeGrid::over(1.0, 100).unwrap();
        let tiny = {
            let mut s2 = s.clone();
            s2.diffusion = DiffusionField::Constant { matrix: vec![vec![0.01]] };
            s2
        };
        let driver = BrownianDriver::generate(5, 0, grid, 1, 1);
        let c = make_control(&ControlFamily::JumpAt { time: 0.0, size: 1.0, direction: vec![1.0] }, grid).unwrap();
        let p = simulate_controlled(&tiny, &c, &driver, 0.0, &[0.3]).unwrap();
        assert_eq!(sigma_star(&v, &g, &p, 0.0, 1e-9).unwrap().node, 0);
        assert!(tau_star(&v, &g, &p, 0.0, 1e-9).unwrap().node > 0);
        assert_eq!(theta_star(&v, &g, &p, 0.0, 1e-9).unwrap().node, 0);
        let rep = stop_rule_payoff_gap(&tiny, &v, &g, &[p], &[c], 0.0, 1e-9).unwrap();
        assert_eq!(rep.n_strict, 1);
    }

    #[test]
    fn zero_control_gap_is_zero() {
        let s = spec();
        let g = Obstacle(&s);
        let v = |t: f64, x: &[f64]| s.g(t, x) + 0.1 * (x[0] - 0.7).max(0.0);
        let (ps, cs): (Vec<_>, Vec<_>) = (0..20).map(|i| path(&s, ControlFamily::Zero, i)).unzip();
        let rep = stop_rule_payoff_gap(&s, &v, &g, &ps, &cs, 0.0, 1e-9).unwrap();
        assert!(rep.records.iter().all(|r| r.payoff_tau == r.payoff_theta));
        assert_eq!(rep.gap.mean, 0.0);
        let mut buf = Vec::new();
        write_stop_records(&rep.records, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 21);
    }

    #[test]
    fn fixed_and_horizon_rules() {
        let s = spec();
        let (p, _) = path(&s, ControlFamily::Zero, 4);
        let g = Obstacle(&s);
        let r = StopRule::new(StopKind::Fixed { time: 0.25 }, 0.0).unwrap();
        assert_eq!(r.apply(&g, &g, &p, 0.0).unwrap().node, 25);
        assert!(StopRule::new(StopKind::Fixed { time: 0.255 }, 0.0).unwrap().apply(&g, &g, &p, 0.0).is_err());
        assert!(StopRule::new(StopKind::Horizon, -1.0).is_err());
        let _ = DriftField::Zero;
    }
}
