use std::path::Path;

use anyhow::Context;
use gamelab_core::lab::{self, PathSetup};
use gamelab_core::sde::write_driver_csv;
use gamelab_core::{
    analytic_rate_check, gradient_bound_check, optimality_gap_study, realize_control, sample_box, simulate_controlled,
    solve_vi, standard_control_family, validate_assumptions, BrownianDriver, GridField, Obstacle, SweepReport,
    TimeGrid, ValueField, Verdict,
};
use rayon::prelude::*;

use crate::artifacts::{write_atomic, VerdictBlock};
use crate::config::{Experiment, Reference};

pub struct Run<'a> {
    pub exp: &'a Experiment,
    pub out: &'a Path,
    artifacts: Vec<String>,
}

impl<'a> Run<'a> {
    pub fn new(exp: &'a Experiment, out: &'a Path) -> Self {
        Self { exp, out, artifacts: Vec::new() }
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> anyhow::Result<()> {
        write_atomic(&self.out.join(name), bytes)?;
        self.artifacts.push(name.to_string());
        Ok(())
    }

    fn write_report(&mut self, report: &SweepReport) -> anyhow::Result<()> {
        let mut buf = Vec::new();
        report.write_csv(&mut buf, Some(&self.exp.preamble()))?;
        self.write(&format!("{}.csv", report.name), &buf)
    }

    fn finish(self, command: &str, verdicts: Vec<Verdict>) -> anyhow::Result<VerdictBlock> {
        let block = VerdictBlock::new(command, &self.exp.config_hash, self.exp.config.seed, verdicts, self.artifacts);
        block.write(self.out)?;
        Ok(block)
    }

    fn path_setup(&self) -> anyhow::Result<PathSetup> {
        let p = self.exp.paths()?;
        let grid = TimeGrid::over(self.exp.spec.horizon - p.t, p.n_steps)?;
        Ok(PathSetup { grid, x0: p.x0.clone(), t: p.t, seed: self.exp.config.seed, n_paths: p.n_paths })
    }
}

fn prefixed(report: &SweepReport) -> impl Iterator<Item = Verdict> + '_ {
    report.verdicts.iter().cloned().map(move |mut v| {
        v.name = format!("{}.{}", report.name, v.name);
        v
    })
}

pub fn simulate(mut run: Run) -> anyhow::Result<VerdictBlock> {
    let exp = run.exp;
    let setup = run.path_setup()?;
    let gamma = exp.config.gamma.unwrap_or(0.0);
    let spec = &exp.spec;
    let results: Vec<_> = (0..setup.n_paths)
        .into_par_iter()
        .map(|i| {
            let driver = BrownianDriver::generate(setup.seed, i as u64, setup.grid, spec.d(), spec.noise_dim());
            let control = realize_control(&exp.config.control, spec, &driver, setup.t, &setup.x0)?;
            let path = simulate_controlled(spec, &control, &driver, gamma, &setup.x0)?;
            Ok((driver, path))
        })
        .collect::<gamelab_core::Result<Vec<_>>>()?;
    let preamble = exp.preamble();
    for (i, (driver, path)) in results.iter().enumerate().take(exp.config.export_paths) {
        let mut buf = format!("{preamble}\n").into_bytes();
        path.write_csv(&mut buf)?;
        run.write(&format!("paths/path_{i:05}.csv"), &buf)?;
        let mut buf = format!("{preamble}\n").into_bytes();
        write_driver_csv(driver, &mut buf)?;
        run.write(&format!("drivers/driver_{i:05}.csv"), &buf)?;
    }
    let terminal: Vec<f64> = results.iter().map(|(_, p)| p.terminal()[0]).collect();
    let finite = terminal.iter().all(|v| v.is_finite());
    let mean = terminal.iter().sum::<f64>() / terminal.len().max(1) as f64;
    let jumps = results.iter().filter(|(_, p)| p.has_jumps()).count();
    let v = Verdict::new(
        "paths_finite",
        finite,
        format!("{} paths at gamma = {gamma}, {jumps} with jumps", terminal.len()),
        &[("terminal_mean_x1", mean), ("n_paths", terminal.len() as f64)],
    );
    run.finish("simulate", vec![v])
}

pub fn solve(mut run: Run) -> anyhow::Result<VerdictBlock> {
    let exp = run.exp;
    let gamma = exp.gamma()?;
    let geometry = exp.grid()?;
    let ug = solve_vi(&exp.spec, gamma, &geometry, &exp.config.schedule)?;
    ug.write_bundle(run.out, "value", Some(&exp.preamble()))?;
    for suffix in ["nodes.csv", "values.csv", "header.json"] {
        run.artifacts.push(format!("value.{suffix}"));
    }
    let p99 = ug.summary.p99;
    let grad = gradient_bound_check(&ug, geometry.grad_tol);
    let mut worst_dominance: f64 = 0.0;
    for (u, g) in ug.u.iter().zip(&ug.g) {
        worst_dominance = worst_dominance.min(u - g);
    }
    let verdicts = vec![
        Verdict::new(
            "residual",
            p99 <= exp.config.residual_tol,
            format!("interior p99 residual {p99:.3e} against {:.1e}", exp.config.residual_tol),
            &[("p99", p99), ("max", ug.summary.max)],
        ),
        Verdict::new(
            "gradient_bound",
            grad.pass,
            format!("max |grad u| / f = {:.5}", grad.max_ratio),
            &[("max_ratio", grad.max_ratio), ("witness_t", grad.witness_t), ("witness_x", grad.witness_x)],
        ),
        Verdict::new(
            "obstacle_dominance",
            worst_dominance >= -exp.config.residual_tol,
            format!("min (u - g) = {worst_dominance:.3e}"),
            &[("min_gap", worst_dominance)],
        ),
    ];
    run.finish("solve-vi", verdicts)
}

pub fn sweep_gamma(mut run: Run) -> anyhow::Result<VerdictBlock> {
    let exp = run.exp;
    let setup = run.path_setup()?;
    let reports = lab::gamma_sweep_moments(&exp.spec, &exp.config.control, &setup, &exp.config.gammas, &exp.config.moments)?;
    let mut verdicts = Vec::new();
    for r in &reports {
        run.write_report(r)?;
        verdicts.extend(prefixed(r));
    }
    run.finish("sweep-gamma", verdicts)
}

pub fn sweep_mollify(mut run: Run) -> anyhow::Result<VerdictBlock> {
    let exp = run.exp;
    let m = exp.mollify()?;
    let report = lab::mollify_sweep(&exp.spec, &m.js, m.k, m.m, m.spacing)?;
    run.write_report(&report)?;
    let verdicts = prefixed(&report).collect();
    run.finish("sweep-mollify", verdicts)
}

pub fn study_rate(mut run: Run) -> anyhow::Result<VerdictBlock> {
    let exp = run.exp;
    let study = lab::value_rate_study(&exp.spec, &exp.config.gammas, &exp.grid()?, &exp.config.schedule)?;
    run.write_report(&study.report)?;
    let mut verdicts: Vec<Verdict> = prefixed(&study.report).collect();
    if exp.config.reference == Reference::Obstacle {
        let analytic = analytic_rate_check(&study.grids, &Obstacle(&exp.spec))?;
        run.write_report(&analytic)?;
        verdicts.extend(prefixed(&analytic));
    }
    run.finish("study-rate", verdicts)
}

pub fn study_optimality(mut run: Run) -> anyhow::Result<VerdictBlock> {
    let exp = run.exp;
    let spec = &exp.spec;
    let setup = run.path_setup()?;
    let family = exp.config.family.clone().unwrap_or_else(|| standard_control_family(spec.d()));
    let obstacle = Obstacle(spec);
    let solved;
    let grid_field;
    let (field, value): (&dyn ValueField, f64) = match exp.config.reference {
        Reference::Obstacle => (&obstacle, spec.g(setup.t, &setup.x0)),
        Reference::Grid => {
            solved = solve_vi(spec, exp.gamma()?, &exp.grid()?, &exp.config.schedule)?;
            grid_field = GridField::new(&solved);
            let v = grid_field.eval(setup.t, &setup.x0);
            (&grid_field, v)
        }
    };
    let tol = match (exp.config.tol, exp.config.grid) {
        (Some(t), _) => t,
        (None, Some(g)) => g.contact_tol,
        (None, None) => gamelab_core::GridSpec::new(1, 2, 1.0).contact_tol,
    };
    let report = optimality_gap_study(spec, field, value, &family, &setup, tol, exp.config.budget)?;
    let mut csv = format!("{}\nparameter,label,statistic,mean,stderr,n\n", exp.preamble());
    for (i, o) in report.outcomes.iter().enumerate() {
        let label = serde_json::to_string(&o.control)?.replace(',', ";");
        csv.push_str(&format!("{i},{label},payoff,{},{},{}\n", o.payoff.mean, o.payoff.stderr, o.payoff.n));
    }
    run.write("optimality.csv", csv.as_bytes())?;
    let v = Verdict::new(
        "no_control_beats_value",
        report.pass,
        format!(
            "min J - value = {:.4e} against allowance {:.4e} (best control #{})",
            report.margin, report.allowance, report.best
        ),
        &[("value", report.value), ("margin", report.margin), ("allowance", report.allowance)],
    );
    run.finish("study-optimality", vec![v])
}

pub fn validate(mut run: Run) -> anyhow::Result<VerdictBlock> {
    let exp = run.exp;
    let s = &exp.config.sample;
    let points = sample_box(exp.spec.d(), s.half_width, s.n_points, exp.config.seed);
    let report = validate_assumptions(&exp.spec, &points)?;
    let mut bytes = serde_json::to_vec_pretty(&report).context("serializing the assumption report")?;
    bytes.push(b'\n');
    run.write("validate.report.json", &bytes)?;
    let verdicts = report
        .checks
        .iter()
        .map(|c| {
            let mut metrics = vec![("estimate", c.estimate), ("bound", c.bound)];
            if let Some(t) = c.witness_time {
                metrics.push(("witness_time", t));
            }
            let witness = c.witness.as_ref().map(|w| format!(" at {w:?}")).unwrap_or_default();
            Verdict::new(&c.name, c.pass, format!("{:.4e} against {:.4e}{witness}", c.estimate, c.bound), &metrics)
        })
        .collect();
    run.finish("validate", verdicts)
}
