//! Sweeps over the perturbation level and the mollification indices, with
//! fitted rates and verdicts.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coeffs::PayoffFn;
use crate::control::{check_class_totals, realize_control, ControlFamily};
use crate::error::{Error, Result};
use crate::fit::{fit_loglog, LogFit};
use crate::game::{payoff_at_node, GameSpec};
use crate::grid::TimeGrid;
use crate::mollify::{mollify_payoffs, MollifiedField};
use crate::rng::BrownianDriver;
use crate::sde::{simulate_controlled, sup_distance, Estimate};
use crate::stopper::{theta_star, Obstacle, ValueField};
use crate::vi::{solve_vi, sup_interior_difference, GridField, GridSpec, PenaltySchedule, ValueGrid};

pub const MIN_SWEEP_GAMMAS: usize = 5;
pub const MIN_SWEEP_PATHS: usize = 1000;
pub const MIN_OPTIMALITY_CONTROLS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub parameter: f64,
    pub label: String,
    pub statistic: String,
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub name: String,
    pub pass: bool,
    pub detail: String,
    pub metrics: BTreeMap<String, f64>,
}

impl Verdict {
    pub fn new(name: &str, pass: bool, detail: String, metrics: &[(&str, f64)]) -> Self {
        Self {
            name: name.into(),
            pass,
            detail,
            metrics: metrics.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub name: String,
    /// Sorted by `parameter`, ascending.
    pub rows: Vec<SweepRow>,
    pub fit: Option<LogFit>,
    pub degenerate: bool,
    pub verdicts: Vec<Verdict>,
}

impl SweepReport {
    pub fn pass(&self) -> bool {
        self.verdicts.iter().all(|v| v.pass)
    }

    pub fn verdict(&self, name: &str) -> Option<&Verdict> {
        self.verdicts.iter().find(|v| v.name == name)
    }

    /// Long-format rows `parameter,label,statistic,mean,stderr,n`.
    pub fn write_csv<W: Write>(&self, out: &mut W, preamble: Option<&str>) -> std::io::Result<()> {
        if let Some(p) = preamble {
            writeln!(out, "{p}")?;
        }
        writeln!(out, "parameter,label,statistic,mean,stderr,n")?;
        for r in &self.rows {
            writeln!(out, "{},{},{},{},{},{}", r.parameter, r.label, r.statistic, r.mean, r.stderr, r.n)?;
        }
        Ok(())
    }
}

fn sort_rows(rows: &mut [SweepRow]) {
    rows.sort_by(|a, b| a.parameter.total_cmp(&b.parameter));
}

/// Fit over rows whose standard error is below 20% of the mean.
pub fn fit_rows(rows: &[SweepRow]) -> Result<LogFit> {
    let used: Vec<&SweepRow> = rows.iter().filter(|r| r.mean > 0.0 && r.stderr < 0.2 * r.mean).collect();
    let xs: Vec<f64> = used.iter().map(|r| r.parameter).collect();
    let ys: Vec<f64> = used.iter().map(|r| r.mean).collect();
    fit_loglog(&xs, &ys)
}

/// Monte Carlo setup shared by the path-based studies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSetup {
    pub grid: TimeGrid,
    pub x0: Vec<f64>,
    /// Calendar time at which the game starts.
    #[serde(default)]
    pub t: f64,
    pub seed: u64,
    pub n_paths: usize,
}

impl PathSetup {
    fn driver(&self, spec: &GameSpec, i: usize) -> BrownianDriver {
        BrownianDriver::generate(self.seed, i as u64, self.grid, spec.d(), spec.noise_dim())
    }

    fn check(&self, spec: &GameSpec) -> Result<()> {
        spec.check()?;
        if self.x0.len() != spec.d() {
            return Err(Error::Config(format!("x0 must have {} entries", spec.d())));
        }
        if (self.t + self.grid.horizon() - spec.horizon).abs() > 1e-9 * spec.horizon.max(1.0) {
            return Err(Error::GridMismatch(format!(
                "path grid covers [{}, {}] but the horizon is {}",
                self.t,
                self.t + self.grid.horizon(),
                spec.horizon
            )));
        }
        Ok(())
    }
}

fn check_gamma_list(gammas: &[f64], need: usize) -> Result<()> {
    if gammas.len() < need {
        return Err(Error::InsufficientSweep { need, got: gammas.len() });
    }
    if let Some(g) = gammas.iter().find(|g| !(**g > 0.0 && **g < 1.0)) {
        return Err(Error::Config(format!("sweep gammas must lie in (0, 1), got {g}")));
    }
    Ok(())
}

/// Per-path `sup |X^gamma - X|`, one row per path with one entry per gamma.
pub fn coupled_sup_distances(
    spec: &GameSpec,
    family: &ControlFamily,
    setup: &PathSetup,
    gammas: &[f64],
) -> Result<Vec<Vec<f64>>> {
    setup.check(spec)?;
    (0..setup.n_paths)
        .into_par_iter()
        .map(|i| {
            let driver = setup.driver(spec, i);
            let control = realize_control(family, spec, &driver, 0.0, &setup.x0)?;
            let base = simulate_controlled(spec, &control, &driver, 0.0, &setup.x0)?;
            gammas
                .iter()
                .map(|&g| {
                    let p = simulate_controlled(spec, &control, &driver, g, &setup.x0)?;
                    sup_distance(&p, &base, 1.0)
                })
                .collect()
        })
        .collect()
}

/// Coupling sweep: `E[sup |X^gamma - X|^p]` per gamma for each exponent in `ps`,
/// all from one set of coupled paths.
pub fn gamma_sweep_moments(
    spec: &GameSpec,
    family: &ControlFamily,
    setup: &PathSetup,
    gammas: &[f64],
    ps: &[f64],
) -> Result<Vec<SweepReport>> {
    check_gamma_list(gammas, MIN_SWEEP_GAMMAS)?;
    if setup.n_paths < MIN_SWEEP_PATHS {
        return Err(Error::Config(format!(
            "coupling sweep needs at least {MIN_SWEEP_PATHS} paths, got {}",
            setup.n_paths
        )));
    }
    if ps.iter().any(|p| !(*p >= 1.0)) {
        return Err(Error::Config("moment exponents must be >= 1".into()));
    }
    let raw = coupled_sup_distances(spec, family, setup, gammas)?;
    ps.iter().map(|&p| coupling_report(&raw, gammas, p)).collect()
}

pub fn gamma_sweep(
    spec: &GameSpec,
    family: &ControlFamily,
    setup: &PathSetup,
    gammas: &[f64],
    p: f64,
) -> Result<SweepReport> {
    Ok(gamma_sweep_moments(spec, family, setup, gammas, &[p])?.remove(0))
}

fn coupling_report(raw: &[Vec<f64>], gammas: &[f64], p: f64) -> Result<SweepReport> {
    let mut rows = gammas
        .iter()
        .enumerate()
        .map(|(j, &g)| {
            let xs: Vec<f64> = raw.iter().map(|r| r[j].powf(p)).collect();
            let e = Estimate::from_samples(&xs)?;
            Ok(SweepRow {
                parameter: g,
                label: format!("gamma={g}"),
                statistic: format!("sup_distance_p{p}"),
                mean: e.mean,
                stderr: e.stderr,
                n: e.n,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    sort_rows(&mut rows);
    if rows.iter().all(|r| r.mean < 1e-300) {
        return Err(Error::DegenerateFit("all coupling statistics are below the noise floor".into()));
    }
    let fit = fit_rows(&rows)?;
    let in_band = fit.slope >= 0.9 * p && fit.slope <= 1.1 * p;
    let monotone = rows.windows(2).all(|w| w[0].mean <= w[1].mean + 2.0 * (w[0].stderr + w[1].stderr));
    let verdicts = vec![
        Verdict::new(
            "coupling_slope",
            in_band,
            format!("slope {:.4} against [{:.2}, {:.2}]", fit.slope, 0.9 * p, 1.1 * p),
            &[("slope", fit.slope), ("p", p)],
        ),
        Verdict::new(
            "fit_quality",
            fit.r2 >= 0.95,
            format!("R^2 {:.5} over {} rows", fit.r2, fit.n_used),
            &[("r2", fit.r2)],
        ),
        Verdict::new(
            "coupling_collapse",
            monotone,
            "means non-increasing as gamma decreases, within 2 standard errors".into(),
            &[],
        ),
    ];
    Ok(SweepReport { name: format!("gamma_sweep_p{p}"), rows, fit: Some(fit), degenerate: false, verdicts })
}

fn check_dyadic(gammas: &[f64]) -> Result<()> {
    check_gamma_list(gammas, 3)?;
    if gammas.windows(2).any(|w| (w[1] - 0.5 * w[0]).abs() > 1e-12 * w[0]) {
        return Err(Error::Config("rate study gammas must halve from one entry to the next".into()));
    }
    Ok(())
}

/// Solve the grid problem once per gamma, concurrently.
pub fn solve_sweep(
    spec: &GameSpec,
    gammas: &[f64],
    geometry: &GridSpec,
    schedule: &PenaltySchedule,
) -> Result<Vec<ValueGrid>> {
    gammas.par_iter().map(|&g| solve_vi(spec, g, geometry, schedule)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateStudy {
    pub report: SweepReport,
    pub grids: Vec<ValueGrid>,
}

fn noise_floor(grids: &[ValueGrid]) -> f64 {
    let sup = grids.iter().flat_map(|g| g.u.iter()).fold(0.0f64, |m, v| m.max(v.abs()));
    1e-10 * (1.0 + sup)
}

/// Largest-gamma calibration `C = D(gamma_max) / gamma_max`, checked on
/// every row.
fn linear_bound_verdict(rows: &[SweepRow], name: &str) -> Verdict {
    let top = rows.last().expect("rows are nonempty");
    let c = top.mean / top.parameter;
    let worst = rows.iter().map(|r| r.mean / (c * r.parameter)).fold(0.0, f64::max);
    Verdict::new(
        name,
        worst <= 1.0 + 1e-12,
        format!("C = {c:.6e} from gamma = {}; worst D / (C gamma) = {worst:.4}", top.parameter),
        &[("fitted_c", c), ("worst_ratio", worst)],
    )
}

/// Cauchy differences `D(gamma) = sup |u^gamma - u^{gamma/2}|` over the
/// interior, from solves on one grid.
pub fn value_rate_study(
    spec: &GameSpec,
    gammas: &[f64],
    geometry: &GridSpec,
    schedule: &PenaltySchedule,
) -> Result<RateStudy> {
    check_dyadic(gammas)?;
    let grids = solve_sweep(spec, gammas, geometry, schedule)?;
    let mut rows = Vec::new();
    for w in 0..grids.len() - 1 {
        let d = sup_interior_difference(&grids[w], &grids[w + 1])?;
        rows.push(SweepRow {
            parameter: gammas[w],
            label: format!("gamma={}", gammas[w]),
            statistic: "cauchy_sup".into(),
            mean: d,
            stderr: 0.0,
            n: 1,
        });
    }
    sort_rows(&mut rows);
    let floor = noise_floor(&grids);
    if rows.iter().all(|r| r.mean < floor) {
        let verdicts = vec![Verdict::new(
            "noise_floor",
            true,
            "degenerate: below noise floor".into(),
            &[("floor", floor)],
        )];
        let report = SweepReport { name: "value_rate".into(), rows, fit: None, degenerate: true, verdicts };
        return Ok(RateStudy { report, grids });
    }
    let fit = fit_rows(&rows)?;
    let verdicts = vec![
        Verdict::new("rate_slope", fit.slope >= 0.8, format!("slope {:.4} against >= 0.8", fit.slope), &[
            ("slope", fit.slope),
        ]),
        Verdict::new("fit_quality", fit.r2 >= 0.95, format!("R^2 {:.5}", fit.r2), &[("r2", fit.r2)]),
        linear_bound_verdict(&rows, "linear_bound"),
    ];
    let report = SweepReport { name: "value_rate".into(), rows, fit: Some(fit), degenerate: false, verdicts };
    Ok(RateStudy { report, grids })
}

/// `sup |u^gamma - v|` over the interior against a known limit `v`, with the
/// bound `<= C gamma` calibrated on the largest gamma.
pub fn analytic_rate_check(grids: &[ValueGrid], reference: &dyn ValueField) -> Result<SweepReport> {
    if grids.len() < 2 {
        return Err(Error::InsufficientSweep { need: 2, got: grids.len() });
    }
    let mut rows: Vec<SweepRow> = grids
        .iter()
        .map(|g| {
            let mut d: f64 = 0.0;
            for n in 0..g.n_t() {
                for i in 0..g.n_x() {
                    if g.is_interior_x(i) {
                        let v = reference.eval(g.t_nodes[n], &g.x_nodes[i..=i]);
                        d = d.max((g.u_at(n, i) - v).abs());
                    }
                }
            }
            SweepRow {
                parameter: g.gamma,
                label: format!("gamma={}", g.gamma),
                statistic: "sup_to_limit".into(),
                mean: d,
                stderr: 0.0,
                n: 1,
            }
        })
        .collect();
    sort_rows(&mut rows);
    let fit = fit_rows(&rows).ok();
    let verdicts = vec![linear_bound_verdict(&rows, "linear_bound")];
    Ok(SweepReport { name: "analytic_rate".into(), rows, fit, degenerate: false, verdicts })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiminfReport {
    pub n_paths: usize,
    pub violations: usize,
    pub fraction: f64,
    pub slack: f64,
    pub extrapolations: u64,
    pub pass: bool,
}

/// On coupled paths, compare `min` over the last three gammas of
/// `theta*^{gamma_k}` (against `u^{gamma_k}` on the perturbed path) with
/// `theta*` on the base path against `reference`.
pub fn stopping_liminf_check(
    spec: &GameSpec,
    family: &ControlFamily,
    setup: &PathSetup,
    grids: &[ValueGrid],
    reference: &dyn ValueField,
    tol: f64,
) -> Result<LiminfReport> {
    setup.check(spec)?;
    if grids.is_empty() || setup.n_paths == 0 {
        return Err(Error::EmptySamples("liminf check needs value grids and coupled paths".into()));
    }
    let fields: Vec<GridField> = grids.iter().map(GridField::new).collect();
    let g = Obstacle(spec);
    let last = grids.len().min(3);
    let dt = setup.grid.dt;
    let slack = 2.0 * dt;
    let flags = (0..setup.n_paths)
        .into_par_iter()
        .map(|i| {
            let driver = setup.driver(spec, i);
            let control = realize_control(family, spec, &driver, 0.0, &setup.x0)?;
            let base = simulate_controlled(spec, &control, &driver, 0.0, &setup.x0)?;
            let theta = theta_star(reference, &g, &base, setup.t, tol)?.node as f64 * dt;
            let mut tail = f64::INFINITY;
            for (field, grid) in fields.iter().zip(grids).skip(grids.len() - last) {
                let p = simulate_controlled(spec, &control, &driver, grid.gamma, &setup.x0)?;
                let th = theta_star(field, &g, &p, setup.t, tol)?.node as f64 * dt;
                tail = tail.min(th);
            }
            Ok(tail < theta - slack - 1e-12)
        })
        .collect::<Result<Vec<bool>>>()?;
    let violations = flags.iter().filter(|&&b| b).count();
    let fraction = violations as f64 / setup.n_paths as f64;
    Ok(LiminfReport {
        n_paths: setup.n_paths,
        violations,
        fraction,
        slack,
        extrapolations: fields.iter().map(GridField::extrapolations).sum(),
        pass: fraction <= 0.05,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlOutcome {
    pub control: ControlFamily,
    /// `J(n, nu, theta*)`.
    pub payoff: Estimate,
    pub mean_total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimalityReport {
    pub value: f64,
    pub outcomes: Vec<ControlOutcome>,
    /// Index of the control with the smallest estimated payoff.
    pub best: usize,
    /// `min J - value`.
    pub margin: f64,
    /// Allowed shortfall: two standard errors of the best control plus `budget`.
    pub allowance: f64,
    pub pass: bool,
}

/// Estimate `J(n, nu, theta*)` for every control in `family` and compare the
/// smallest with `value`.
pub fn optimality_gap_study(
    spec: &GameSpec,
    value_field: &dyn ValueField,
    value: f64,
    family: &[ControlFamily],
    setup: &PathSetup,
    tol: f64,
    budget: f64,
) -> Result<OptimalityReport> {
    setup.check(spec)?;
    if family.len() < MIN_OPTIMALITY_CONTROLS {
        return Err(Error::Config(format!(
            "optimality study needs at least {MIN_OPTIMALITY_CONTROLS} controls, got {}",
            family.len()
        )));
    }
    if setup.n_paths < 2 {
        return Err(Error::EmptySamples("need at least 2 paths".into()));
    }
    let g = Obstacle(spec);
    let mut outcomes = Vec::with_capacity(family.len());
    for fam in family {
        let per_path = (0..setup.n_paths)
            .into_par_iter()
            .map(|i| {
                let driver = setup.driver(spec, i);
                let control = realize_control(fam, spec, &driver, 0.0, &setup.x0)?;
                let path = simulate_controlled(spec, &control, &driver, 0.0, &setup.x0)?;
                let k = theta_star(value_field, &g, &path, setup.t, tol)?.node;
                Ok((payoff_at_node(spec, &path, &control, k, setup.t)?, control.terminal_total()))
            })
            .collect::<Result<Vec<(f64, f64)>>>()?;
        let totals: Vec<f64> = per_path.iter().map(|p| p.1).collect();
        let mean_total = check_class_totals(&totals, spec.profile.k2, &setup.x0)?;
        let payoffs: Vec<f64> = per_path.iter().map(|p| p.0).collect();
        outcomes.push(ControlOutcome { control: fam.clone(), payoff: Estimate::from_samples(&payoffs)?, mean_total });
    }
    let best = (0..outcomes.len())
        .min_by(|&a, &b| outcomes[a].payoff.mean.total_cmp(&outcomes[b].payoff.mean))
        .expect("family is nonempty");
    let margin = outcomes[best].payoff.mean - value;
    let allowance = 2.0 * outcomes[best].payoff.stderr + budget;
    Ok(OptimalityReport { value, outcomes, best, margin, allowance, pass: margin >= -allowance })
}

/// A default ten-member family in direction `e_1` and `-e_1`.
pub fn standard_control_family(d: usize) -> Vec<ControlFamily> {
    let e = |s: f64| {
        let mut v = vec![0.0; d];
        v[0] = s;
        v
    };
    vec![
        ControlFamily::Zero,
        ControlFamily::ConstantDensity { rate: 0.2, direction: e(1.0) },
        ControlFamily::ConstantDensity { rate: 0.5, direction: e(-1.0) },
        ControlFamily::ConstantDensity { rate: 1.0, direction: e(1.0) },
        ControlFamily::ReflectAt { barrier: -0.5, direction: e(1.0) },
        ControlFamily::ReflectAt { barrier: 0.5, direction: e(-1.0) },
        ControlFamily::JumpAt { time: 0.0, size: 0.3, direction: e(1.0) },
        ControlFamily::JumpAt { time: 0.0, size: 0.3, direction: e(-1.0) },
        ControlFamily::ThresholdPush { level: 0.0, size: 0.5, direction: e(1.0) },
        ControlFamily::ThresholdPush { level: 0.25, size: 0.25, direction: e(-1.0) },
    ]
}

/// Mollification sweep over `js` at fixed `(k, m)`, along the first axis.
///
/// Rows hold `sup |g_jkm - g ^ m|` over `B_{k-2}`. The gradient verdict
/// bounds `|d g_jkm / dx_1| / f_jkm(0)` over `B_{k-1}`.
pub fn mollify_sweep(spec: &GameSpec, js: &[u32], k: u32, m: f64, spacing: f64) -> Result<SweepReport> {
    if js.len() < 2 {
        return Err(Error::InsufficientSweep { need: 2, got: js.len() });
    }
    if k < 3 {
        return Err(Error::Config("mollify sweep needs k >= 3 so that B_{k-2} is nonempty".into()));
    }
    if !(spacing > 0.0) {
        return Err(Error::Config("spacing must be positive".into()));
    }
    let d = spec.d();
    let truncated = |x: &[f64]| spec.g(0.0, x).min(m);
    let line = |radius: f64| -> Vec<Vec<f64>> {
        let n = (2.0 * radius / spacing).round() as usize;
        (0..=n)
            .map(|q| {
                let mut x = vec![0.0; d];
                x[0] = -radius + q as f64 * spacing;
                x
            })
            .collect()
    };
    let inner = line(k as f64 - 2.0);
    let cells: Vec<(u32, f64, f64)> = js
        .par_iter()
        .map(|&j| {
            let mp = mollify_payoffs(spec, j, k, m)?;
            let err = inner.iter().map(|x| (mp.g.eval(0.0, x) - truncated(x)).abs()).fold(0.0, f64::max);
            let fine = spacing / 10.0;
            let f0 = mp.f.eval(0.0);
            let grad = line(k as f64 - 1.0)
                .iter()
                .flat_map(|x| {
                    // ten sub-steps per coarse cell
                    (0..10).map(move |s| {
                        let mut a = x.clone();
                        a[0] += s as f64 * fine;
                        a
                    })
                })
                .filter(|x| x[0] + fine <= k as f64 - 1.0 + 1e-12)
                .map(|x| {
                    let mut b = x.clone();
                    b[0] += fine;
                    ((mp.g.eval(0.0, &b) - mp.g.eval(0.0, &x)) / fine).abs() / f0
                })
                .fold(0.0, f64::max);
            Ok((j, err, grad))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows: Vec<SweepRow> = cells
        .iter()
        .map(|&(j, err, _)| SweepRow {
            parameter: j as f64,
            label: format!("j={j};k={k};m={m}"),
            statistic: "sup_error_inner".into(),
            mean: err,
            stderr: 0.0,
            n: inner.len(),
        })
        .collect();
    sort_rows(&mut rows);
    let j_max = *js.iter().max().expect("nonempty") as f64;
    let final_err = rows.last().expect("nonempty").mean;
    let non_increasing = rows.windows(2).all(|w| w[1].mean <= w[0].mean + 1e-12);
    let grad = cells.iter().map(|c| c.2).fold(0.0, f64::max);
    let xs: Vec<f64> = rows.iter().map(|r| 1.0 / r.parameter).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.mean).collect();
    let fit = fit_loglog(&xs, &ys).ok();
    let verdicts = vec![
        Verdict::new("error_non_increasing", non_increasing, "sup error over B_{k-2} along the j-sweep".into(), &[]),
        Verdict::new(
            "final_error",
            final_err <= 0.6 / j_max,
            format!("{final_err:.4e} against 0.6 / j_max = {:.4e}", 0.6 / j_max),
            &[("final_error", final_err), ("bound", 0.6 / j_max)],
        ),
        Verdict::new(
            "gradient_bound",
            grad <= 1.0 + 1e-3,
            format!("max |grad g_jkm| / f_jkm over B_(k-1) = {grad:.6}"),
            &[("max_ratio", grad)],
        ),
    ];
    Ok(SweepReport { name: "mollify_sweep".into(), rows, fit, degenerate: false, verdicts })
}

/// The mollified obstacle for one treble, for callers that want the field.
pub fn mollified_obstacle(spec: &GameSpec, j: u32, k: u32, m: f64) -> Result<PayoffFn> {
    let mp = mollify_payoffs(spec, j, k, m)?;
    Ok(match mp.g {
        PayoffFn::Mollified(f) => PayoffFn::Mollified(f),
        PayoffFn::Zero => PayoffFn::Zero,
        other => PayoffFn::Mollified(Box::new(MollifiedField::new(other, j, k, m, mp.band))),
    })
}
