//! Euler-Maruyama simulation of the controlled state and its perturbed
//! companion on a shared Brownian driver.

use std::io::Write;

use crate::control::ControlPath;
use crate::error::{Error, Result};
use crate::game::GameSpec;
use crate::grid::TimeGrid;
use crate::rng::BrownianDriver;

/// Right-continuous path with explicit left limits, stored row-major
/// (`n_nodes x dim`).
#[derive(Debug, Clone, PartialEq)]
pub struct CadlagPath {
    pub grid: TimeGrid,
    pub dim: usize,
    pub values: Vec<f64>,
    pub pre_values: Vec<f64>,
    pub jump_flags: Vec<bool>,
}

impl CadlagPath {
    pub fn value(&self, k: usize) -> &[f64] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    pub fn pre_value(&self, k: usize) -> &[f64] {
        &self.pre_values[k * self.dim..(k + 1) * self.dim]
    }

    pub fn terminal(&self) -> &[f64] {
        self.value(self.grid.n_steps)
    }

    pub fn has_jumps(&self) -> bool {
        self.jump_flags.iter().any(|&f| f)
    }

    /// Write `s, x_1..x_d, pre_x_1..pre_x_d, jump_flag` rows.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        let mut header = vec!["s".to_string()];
        header.extend((1..=self.dim).map(|i| format!("x_{i}")));
        header.extend((1..=self.dim).map(|i| format!("pre_x_{i}")));
        header.push("jump_flag".into());
        writeln!(out, "{}", header.join(","))?;
        for k in 0..self.grid.n_nodes() {
            write!(out, "{}", self.grid.time(k))?;
            for v in self.value(k).iter().chain(self.pre_value(k)) {
                write!(out, ",{v}")?;
            }
            writeln!(out, ",{}", u8::from(self.jump_flags[k]))?;
        }
        Ok(())
    }
}

/// Write `s, dW_1..dW_d', dWtilde_1..dWtilde_d`, one row per step end `s_k`.
pub fn write_driver_csv<W: Write>(driver: &BrownianDriver, out: &mut W) -> std::io::Result<()> {
    let mut header = vec!["s".to_string()];
    header.extend((1..=driver.noise_dim).map(|i| format!("dW_{i}")));
    header.extend((1..=driver.state_dim).map(|i| format!("dWtilde_{i}")));
    writeln!(out, "{}", header.join(","))?;
    for k in 1..=driver.grid.n_steps {
        write!(out, "{}", driver.grid.time(k))?;
        for v in driver.dw(k).iter().chain(driver.dw_tilde(k)) {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// One Euler step without control, reusing coefficient buffers.
pub(crate) struct Stepper<'a> {
    spec: &'a GameSpec,
    b: Vec<f64>,
    s: Vec<f64>,
}

impl<'a> Stepper<'a> {
    pub(crate) fn new(spec: &'a GameSpec) -> Self {
        Self { spec, b: vec![0.0; spec.d()], s: vec![0.0; spec.d() * spec.noise_dim()] }
    }

    /// `out = x + b(x) dt + sigma(x) dW_k + gamma dW~_k`; `x` sits at node `k - 1`.
    pub(crate) fn advance(
        &mut self,
        x: &[f64],
        driver: &BrownianDriver,
        k: usize,
        gamma: f64,
        out: &mut [f64],
    ) -> Result<()> {
        let (d, w) = (self.spec.d(), self.spec.noise_dim());
        self.spec.drift.eval(x, &mut self.b);
        self.spec.diffusion.eval(x, w, &mut self.s);
        if self.b.iter().chain(&self.s).any(|v| !v.is_finite()) {
            return Err(Error::Numeric { node: k - 1, what: "drift or diffusion evaluation".into() });
        }
        let dt = driver.grid.dt;
        let dw = driver.dw(k);
        let dwt = driver.dw_tilde(k);
        for i in 0..d {
            let noise: f64 = (0..w).map(|j| self.s[i * w + j] * dw[j]).sum();
            out[i] = x[i] + self.b[i] * dt + noise + gamma * dwt[i];
        }
        Ok(())
    }
}

fn check_inputs(spec: &GameSpec, control: &ControlPath, driver: &BrownianDriver, x0: &[f64]) -> Result<()> {
    control.grid.ensure_same(&driver.grid, "control vs driver")?;
    if driver.state_dim != spec.d() || driver.noise_dim != spec.noise_dim() {
        return Err(Error::GridMismatch("driver dimensions differ from the game's".into()));
    }
    if control.dim != spec.d() {
        return Err(Error::GridMismatch(format!(
            "control directions have {} entries, state has {}",
            control.dim,
            spec.d()
        )));
    }
    if x0.len() != spec.d() {
        return Err(Error::Config(format!("initial point must have {} entries", spec.d())));
    }
    Ok(())
}

/// Simulate `X^{[n,nu],gamma}` from `X_{0-} = x0`.
///
/// Per step the diffusion increment comes first and the control second:
/// `X_{s+dt-} = X_s + b dt + sigma dW + gamma dW~ + n dnu^c`, then the atom
/// `X_{s+dt} = X_{s+dt-} + n Delta nu`. A time-0 atom acts before any step.
pub fn simulate_controlled(
    spec: &GameSpec,
    control: &ControlPath,
    driver: &BrownianDriver,
    gamma: f64,
    x0: &[f64],
) -> Result<CadlagPath> {
    check_inputs(spec, control, driver, x0)?;
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::Config(format!("gamma must lie in [0, 1), got {gamma}")));
    }
    let d = spec.d();
    let n = driver.grid.n_nodes();
    let mut values = vec![0.0; n * d];
    let mut pre_values = vec![0.0; n * d];
    let mut jump_flags = vec![false; n];
    let mut stepper = Stepper::new(spec);

    pre_values[..d].copy_from_slice(x0);
    let a0 = control.atom_at(0);
    for i in 0..d {
        values[i] = x0[i] + control.direction(0)[i] * a0;
    }
    jump_flags[0] = a0 > 0.0;

    let mut atoms = control.atoms.iter().peekable();
    if matches!(atoms.peek(), Some(&&(0, _))) {
        atoms.next();
    }
    let mut pre = vec![0.0; d];
    for k in 1..n {
        let (prev, rest) = values.split_at_mut(k * d);
        let x = &prev[(k - 1) * d..];
        stepper.advance(x, driver, k, gamma, &mut pre)?;
        let dir = control.direction(k);
        let inc = control.increments[k];
        if inc > 0.0 {
            for i in 0..d {
                pre[i] += dir[i] * inc;
            }
        }
        let atom = match atoms.peek() {
            Some(&&(node, size)) if node == k => {
                atoms.next();
                size
            }
            _ => 0.0,
        };
        pre_values[k * d..(k + 1) * d].copy_from_slice(&pre);
        let cur = &mut rest[..d];
        if atom > 0.0 {
            jump_flags[k] = true;
            for i in 0..d {
                cur[i] = pre[i] + dir[i] * atom;
            }
        } else {
            cur.copy_from_slice(&pre);
        }
        if cur.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric { node: k, what: "state overflowed".into() });
        }
    }
    Ok(CadlagPath { grid: driver.grid, dim: d, values, pre_values, jump_flags })
}

/// The unperturbed path and a family of perturbed paths sharing one driver
/// and one control.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledSample {
    pub base: CadlagPath,
    pub perturbed: Vec<(f64, CadlagPath)>,
    pub driver_seed: u64,
}

impl CoupledSample {
    pub fn at(&self, gamma: f64) -> Option<&CadlagPath> {
        self.perturbed.iter().find(|(g, _)| *g == gamma).map(|(_, p)| p)
    }
}

fn check_gammas(gammas: &[f64]) -> Result<()> {
    if gammas.is_empty() {
        return Err(Error::Config("need at least one gamma".into()));
    }
    if let Some(g) = gammas.iter().find(|g| !(0.0..1.0).contains(*g)) {
        return Err(Error::Config(format!("gamma must lie in [0, 1), got {g}")));
    }
    Ok(())
}

pub fn simulate_coupled_with(
    spec: &GameSpec,
    control: &ControlPath,
    driver: &BrownianDriver,
    gammas: &[f64],
    x0: &[f64],
) -> Result<CoupledSample> {
    check_gammas(gammas)?;
    let base = simulate_controlled(spec, control, driver, 0.0, x0)?;
    let perturbed = gammas
        .iter()
        .map(|&g| {
            let p = if g == 0.0 { base.clone() } else { simulate_controlled(spec, control, driver, g, x0)? };
            Ok((g, p))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CoupledSample { base, perturbed, driver_seed: driver.seed })
}

/// Coupled sample on the driver with master seed `seed` (path index 0).
pub fn simulate_coupled(
    spec: &GameSpec,
    control: &ControlPath,
    seed: u64,
    gammas: &[f64],
    x0: &[f64],
) -> Result<CoupledSample> {
    let driver = BrownianDriver::generate(seed, 0, control.grid, spec.d(), spec.noise_dim());
    simulate_coupled_with(spec, control, &driver, gammas, x0)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `max_k |a - b|^p` over both right and left limits.
pub fn sup_distance(a: &CadlagPath, b: &CadlagPath, p: f64) -> Result<f64> {
    a.grid.ensure_same(&b.grid, "sup_distance")?;
    if a.dim != b.dim {
        return Err(Error::GridMismatch("paths have different dimensions".into()));
    }
    let mut m: f64 = 0.0;
    for k in 0..a.grid.n_nodes() {
        m = m.max(dist(a.value(k), b.value(k))).max(dist(a.pre_value(k), b.pre_value(k)));
    }
    Ok(m.powf(p))
}

/// Left limit `X_{s-}` at the grid time `s`.
pub fn left_limit(path: &CadlagPath, s: f64) -> Result<&[f64]> {
    let k = path.grid.node_of(s)?;
    Ok(path.pre_value(k))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathStatistic {
    /// `sup_s |X^gamma_s - X_s|^p`.
    SupDistance,
    /// `|X^gamma_T|^p`.
    TerminalNorm,
}

/// Monte Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Result<Self> {
        if xs.len() < 2 {
            return Err(Error::EmptySamples(format!("need at least 2 samples, got {}", xs.len())));
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
        Ok(Self { mean, stderr: (var / n).sqrt(), n: xs.len() })
    }
}

pub fn moment_estimate(
    samples: &[CoupledSample],
    gamma: f64,
    p: f64,
    statistic: PathStatistic,
) -> Result<Estimate> {
    if samples.is_empty() {
        return Err(Error::EmptySamples("no coupled samples".into()));
    }
    let values = samples
        .iter()
        .map(|s| {
            let pert = s
                .at(gamma)
                .ok_or_else(|| Error::Config(format!("sample has no path for gamma = {gamma}")))?;
            match statistic {
                PathStatistic::SupDistance => sup_distance(pert, &s.base, p),
                PathStatistic::TerminalNorm => {
                    Ok(pert.terminal().iter().map(|v| v * v).sum::<f64>().sqrt().powf(p))
                }
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Estimate::from_samples(&values)
}
