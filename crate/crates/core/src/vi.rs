//! Penalized backward solver for the double-obstacle problem with gradient
//! constraint, the approximating game's value `u^gamma`.
//!
//! Only one-dimensional state grids are supported.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::GameSpec;
use crate::stopper::ValueField;

fn default_layer() -> f64 {
    0.1
}

fn default_contact_tol() -> f64 {
    1e-6
}

fn default_grad_tol() -> f64 {
    0.02
}

fn default_grading() -> f64 {
    1.0
}

/// Backward difference used for `d/dt`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeScheme {
    ImplicitEuler,
    /// Second-order backward differences; the step leaving the horizon is
    /// implicit Euler.
    #[default]
    Bdf2,
}

/// Weights `(c0, c1, c2)` with `d/dt u(t_n) ~ c0 u_n + c1 u_{n+1} + c2 u_{n+2}`.
fn time_weights(t: &[f64], n: usize, scheme: TimeScheme) -> (f64, f64, f64) {
    let h1 = t[n + 1] - t[n];
    if scheme == TimeScheme::ImplicitEuler || n + 2 >= t.len() {
        return (-1.0 / h1, 1.0 / h1, 0.0);
    }
    let h2 = t[n + 2] - t[n + 1];
    (
        -(2.0 * h1 + h2) / (h1 * (h1 + h2)),
        (h1 + h2) / (h1 * h2),
        -h1 / (h2 * (h1 + h2)),
    )
}

/// Geometry of the `[0, T] x [-L, L]` grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub n_time: usize,
    pub n_space: usize,
    pub half_width: f64,
    /// Width of the excluded boundary layer as a fraction of `half_width`.
    #[serde(default = "default_layer")]
    pub boundary_layer: f64,
    /// Band `u - g <= contact_tol` labelled as stopping region.
    #[serde(default = "default_contact_tol")]
    pub contact_tol: f64,
    /// Relative slack of the gradient bound check.
    #[serde(default = "default_grad_tol")]
    pub grad_tol: f64,
    /// Time nodes `t_n = T (1 - (1 - n / M)^q)`; `q > 1` refines towards the
    /// horizon, where the obstacle's kink makes the solution rough.
    #[serde(default = "default_grading")]
    pub time_grading: f64,
    #[serde(default)]
    pub time_scheme: TimeScheme,
}

impl GridSpec {
    pub fn new(n_time: usize, n_space: usize, half_width: f64) -> Self {
        Self {
            n_time,
            n_space,
            half_width,
            boundary_layer: default_layer(),
            contact_tol: default_contact_tol(),
            grad_tol: default_grad_tol(),
            time_grading: default_grading(),
            time_scheme: TimeScheme::default(),
        }
    }

    pub fn with_scheme(mut self, scheme: TimeScheme) -> Self {
        self.time_scheme = scheme;
        self
    }

    pub fn graded(mut self, q: f64) -> Self {
        self.time_grading = q;
        self
    }

    pub fn time_nodes(&self, horizon: f64) -> Vec<f64> {
        let m = self.n_time as f64;
        let mut t: Vec<f64> = (0..=self.n_time)
            .map(|n| {
                if self.time_grading == 1.0 {
                    horizon * n as f64 / m
                } else {
                    horizon * (1.0 - (1.0 - n as f64 / m).powf(self.time_grading))
                }
            })
            .collect();
        t[self.n_time] = horizon;
        t
    }

    pub fn check(&self) -> Result<()> {
        if self.n_time == 0 || self.n_space < 4 {
            return Err(Error::Config("grid needs n_time >= 1 and n_space >= 4".into()));
        }
        if !(self.half_width > 0.0 && self.half_width.is_finite()) {
            return Err(Error::Config("half_width must be positive".into()));
        }
        if !(0.0..0.5).contains(&self.boundary_layer) {
            return Err(Error::Config("boundary_layer must lie in [0, 0.5)".into()));
        }
        if self.contact_tol < 0.0 || self.grad_tol < 0.0 {
            return Err(Error::Config("tolerances must be nonnegative".into()));
        }
        if !(1.0..=4.0).contains(&self.time_grading) {
            return Err(Error::Config("time_grading must lie in [1, 4]".into()));
        }
        Ok(())
    }
}

fn default_max_outer() -> usize {
    100
}

fn default_newton_tol() -> f64 {
    1e-10
}

/// Penalty weights for the obstacle and the gradient constraint, one pair
/// per stage; every stage is a complete backward sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltySchedule {
    pub eps_obstacle: Vec<f64>,
    pub eps_gradient: Vec<f64>,
    /// Newton iteration cap per time level.
    #[serde(default = "default_max_outer")]
    pub max_outer: usize,
    #[serde(default = "default_newton_tol")]
    pub newton_tol: f64,
}

impl Default for PenaltySchedule {
    fn default() -> Self {
        Self {
            eps_obstacle: vec![1e-2, 1e-4, 1e-6],
            eps_gradient: vec![1e-2, 1e-4, 1e-6],
            max_outer: default_max_outer(),
            newton_tol: default_newton_tol(),
        }
    }
}

impl PenaltySchedule {
    pub fn check(&self) -> Result<()> {
        let seq = |name: &str, v: &[f64]| -> Result<()> {
            if v.is_empty() || v.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
                return Err(Error::Config(format!("{name} must be a nonempty list of positive weights")));
            }
            if v.windows(2).any(|w| w[1] >= w[0]) {
                return Err(Error::Config(format!("{name} must be strictly decreasing")));
            }
            Ok(())
        };
        seq("eps_obstacle", &self.eps_obstacle)?;
        seq("eps_gradient", &self.eps_gradient)?;
        if self.eps_obstacle.len() != self.eps_gradient.len() {
            return Err(Error::Config("eps_obstacle and eps_gradient need the same length".into()));
        }
        if self.max_outer == 0 || !(self.newton_tol > 0.0) {
            return Err(Error::Config("max_outer must be >= 1 and newton_tol > 0".into()));
        }
        Ok(())
    }

    pub fn n_stages(&self) -> usize {
        self.eps_obstacle.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Stop,
    Continue,
    GradientActive,
}

impl Region {
    fn as_str(self) -> &'static str {
        match self {
            Region::Stop => "stop",
            Region::Continue => "continue",
            Region::GradientActive => "gradient_active",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "stop" => Ok(Region::Stop),
            "continue" => Ok(Region::Continue),
            "gradient_active" => Ok(Region::GradientActive),
            other => Err(Error::Config(format!("unknown region label {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualSummary {
    pub max: f64,
    pub p99: f64,
    pub n_interior: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageDiagnostics {
    pub eps_obstacle: f64,
    pub eps_gradient: f64,
    pub residual: ResidualSummary,
    /// Newton iterations summed over time levels.
    pub newton_iterations: usize,
}

/// Discrete `u^gamma` on a time-space grid; per-node arrays are stored
/// row-major with one row per time node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueGrid {
    pub gamma: f64,
    pub horizon: f64,
    pub geometry: GridSpec,
    pub schedule: PenaltySchedule,
    pub t_nodes: Vec<f64>,
    pub x_nodes: Vec<f64>,
    #[serde(skip)]
    pub u: Vec<f64>,
    #[serde(skip)]
    pub grad: Vec<f64>,
    #[serde(skip)]
    pub residual: Vec<f64>,
    #[serde(skip)]
    pub regions: Vec<Region>,
    /// The obstacle sampled on the grid.
    #[serde(skip)]
    pub g: Vec<f64>,
    /// The cost `f` at each time node.
    pub f: Vec<f64>,
    pub summary: ResidualSummary,
    pub stages: Vec<StageDiagnostics>,
}

impl ValueGrid {
    pub fn n_t(&self) -> usize {
        self.t_nodes.len()
    }

    pub fn n_x(&self) -> usize {
        self.x_nodes.len()
    }

    pub fn idx(&self, n: usize, i: usize) -> usize {
        n * self.n_x() + i
    }

    pub fn u_at(&self, n: usize, i: usize) -> f64 {
        self.u[self.idx(n, i)]
    }

    /// Step from time node `n` to `n + 1`.
    pub fn dt(&self, n: usize) -> f64 {
        self.t_nodes[n + 1] - self.t_nodes[n]
    }

    pub fn dx(&self) -> f64 {
        2.0 * self.geometry.half_width / self.geometry.n_space as f64
    }

    /// Spatial nodes outside the boundary layer, excluding the box edges.
    pub fn is_interior_x(&self, i: usize) -> bool {
        let l = self.geometry.half_width;
        i > 0 && i + 1 < self.n_x() && self.x_nodes[i].abs() <= l - self.geometry.boundary_layer * l + 1e-12
    }

    /// Diagnostic nodes: interior in space and strictly before the horizon.
    pub fn is_interior(&self, n: usize, i: usize) -> bool {
        n + 1 < self.n_t() && self.is_interior_x(i)
    }

    /// Nearest spatial node to `x`.
    pub fn nearest_x(&self, x: f64) -> usize {
        let i = ((x - self.x_nodes[0]) / self.dx()).round();
        i.clamp(0.0, (self.n_x() - 1) as f64) as usize
    }

    /// Bilinear interpolation in `(t, x)`; the flag is set when the query
    /// left the grid and was clamped.
    pub fn interpolate(&self, t: f64, x: f64) -> (f64, bool) {
        let (t0, x0) = (self.t_nodes[0], self.x_nodes[0]);
        let (tn, xn) = (self.t_nodes[self.n_t() - 1], self.x_nodes[self.n_x() - 1]);
        let eps = 1e-12;
        let outside = t < t0 - eps || t > tn + eps || x < x0 - eps || x > xn + eps;
        let tc = t.clamp(t0, tn);
        let xc = x.clamp(x0, xn);
        let n = (self.t_nodes.partition_point(|&s| s <= tc).max(1) - 1).min(self.n_t() - 2);
        let wt = ((tc - self.t_nodes[n]) / self.dt(n)).clamp(0.0, 1.0);
        let (i, wx) = locate(xc, x0, self.dx(), self.n_x());
        let u = |a: usize, b: usize| self.u_at(a, b);
        let lo = (1.0 - wx) * u(n, i) + wx * u(n, i + 1);
        let hi = (1.0 - wx) * u(n + 1, i) + wx * u(n + 1, i + 1);
        ((1.0 - wt) * lo + wt * hi, outside)
    }

    /// Write `nodes.csv`, `values.csv` and `header.json` under `stem`.
    pub fn write_bundle(&self, dir: &Path, stem: &str, preamble: Option<&str>) -> Result<()> {
        let mut nodes = Vec::new();
        let mut values = Vec::new();
        self.write_nodes_csv(&mut nodes, preamble)?;
        self.write_values_csv(&mut values, preamble)?;
        write_atomic(&dir.join(format!("{stem}.nodes.csv")), &nodes)?;
        write_atomic(&dir.join(format!("{stem}.values.csv")), &values)?;
        let header = serde_json::to_vec_pretty(self)?;
        write_atomic(&dir.join(format!("{stem}.header.json")), &header)?;
        Ok(())
    }

    pub fn write_nodes_csv<W: Write>(&self, out: &mut W, preamble: Option<&str>) -> std::io::Result<()> {
        if let Some(p) = preamble {
            writeln!(out, "{p}")?;
        }
        writeln!(out, "axis,index,coordinate")?;
        for (k, t) in self.t_nodes.iter().enumerate() {
            writeln!(out, "t,{k},{t}")?;
        }
        for (k, x) in self.x_nodes.iter().enumerate() {
            writeln!(out, "x,{k},{x}")?;
        }
        Ok(())
    }

    pub fn write_values_csv<W: Write>(&self, out: &mut W, preamble: Option<&str>) -> std::io::Result<()> {
        if let Some(p) = preamble {
            writeln!(out, "{p}")?;
        }
        writeln!(out, "t_index,x_index,u,g,grad,residual,region")?;
        for n in 0..self.n_t() {
            for i in 0..self.n_x() {
                let k = self.idx(n, i);
                writeln!(
                    out,
                    "{n},{i},{},{},{},{},{}",
                    self.u[k],
                    self.g[k],
                    self.grad[k],
                    self.residual[k],
                    self.regions[k].as_str()
                )?;
            }
        }
        Ok(())
    }

    pub fn read_bundle(dir: &Path, stem: &str) -> Result<Self> {
        let header = fs::read_to_string(dir.join(format!("{stem}.header.json")))?;
        let mut grid: ValueGrid = serde_json::from_str(&header)?;
        let size = grid.n_t() * grid.n_x();
        grid.u = vec![0.0; size];
        grid.g = vec![0.0; size];
        grid.grad = vec![0.0; size];
        grid.residual = vec![0.0; size];
        grid.regions = vec![Region::Continue; size];
        let file = fs::File::open(dir.join(format!("{stem}.values.csv")))?;
        let mut seen = 0usize;
        let bad = |line: &str| Error::Config(format!("malformed values row: {line}"));
        for line in BufReader::new(file).lines() {
            let line = line?;
            if line.starts_with('#') || line.starts_with("t_index") || line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 7 {
                return Err(bad(&line));
            }
            let n: usize = cols[0].parse().map_err(|_| bad(&line))?;
            let i: usize = cols[1].parse().map_err(|_| bad(&line))?;
            if n >= grid.n_t() || i >= grid.n_x() {
                return Err(bad(&line));
            }
            let k = grid.idx(n, i);
            let num = |c: &str| c.parse::<f64>().map_err(|_| bad(&line));
            grid.u[k] = num(cols[2])?;
            grid.g[k] = num(cols[3])?;
            grid.grad[k] = num(cols[4])?;
            grid.residual[k] = num(cols[5])?;
            grid.regions[k] = Region::parse(cols[6])?;
            seen += 1;
        }
        if seen != size {
            return Err(Error::Config(format!("values file has {seen} rows, header implies {size}")));
        }
        Ok(grid)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn locate(v: f64, origin: f64, h: f64, n: usize) -> (usize, f64) {
    let pos = (v - origin) / h;
    let k = (pos.floor().max(0.0) as usize).min(n - 2);
    (k, (pos - k as f64).clamp(0.0, 1.0))
}

/// `ValueGrid` as a field that counts clamped out-of-grid queries.
pub struct GridField<'a> {
    pub grid: &'a ValueGrid,
    extrapolations: AtomicU64,
}

impl<'a> GridField<'a> {
    pub fn new(grid: &'a ValueGrid) -> Self {
        Self { grid, extrapolations: AtomicU64::new(0) }
    }

    pub fn extrapolations(&self) -> u64 {
        self.extrapolations.load(Ordering::Relaxed)
    }
}

impl ValueField for GridField<'_> {
    fn eval(&self, t: f64, x: &[f64]) -> f64 {
        let (v, outside) = self.grid.interpolate(t, x[0]);
        if outside {
            self.extrapolations.fetch_add(1, Ordering::Relaxed);
        }
        v
    }
}

/// Spatial stencil weights of `L^gamma` at each node: `L u_i = lo_i u_{i-1}
/// - (lo_i + up_i) u_i + up_i u_{i+1}`.
struct Stencil {
    lo: Vec<f64>,
    up: Vec<f64>,
}

fn assemble(spec: &GameSpec, gamma: f64, x: &[f64], dx: f64) -> Result<Stencil> {
    let n = x.len();
    let w = spec.noise_dim();
    let mut lo = vec![0.0; n];
    let mut up = vec![0.0; n];
    let mut b = [0.0];
    let mut s = vec![0.0; w];
    for i in 1..n - 1 {
        spec.drift.eval(&x[i..=i], &mut b);
        spec.diffusion.eval(&x[i..=i], w, &mut s);
        let a = s.iter().map(|v| v * v).sum::<f64>() + gamma * gamma;
        if !(a.is_finite() && b[0].is_finite()) {
            return Err(Error::Numeric { node: i, what: "coefficient evaluation on the spatial grid".into() });
        }
        let diff = 0.5 * a / (dx * dx);
        let bx = b[0];
        if bx.abs() * dx <= a {
            lo[i] = diff - bx / (2.0 * dx);
            up[i] = diff + bx / (2.0 * dx);
        } else {
            lo[i] = diff + (-bx).max(0.0) / dx;
            up[i] = diff + bx.max(0.0) / dx;
        }
        if lo[i] < 0.0 || up[i] < 0.0 {
            return Err(Error::Config(format!(
                "stencil at x = {} has a negative off-diagonal weight",
                x[i]
            )));
        }
    }
    Ok(Stencil { lo, up })
}

/// One implicit time level: unknowns are the interior entries of `u`.
struct Level<'a> {
    st: &'a Stencil,
    /// Coefficient of the unknown in the time difference.
    c0: f64,
    /// Known part of the time difference, from later levels.
    known: &'a [f64],
    g: &'a [f64],
    h: &'a [f64],
    f: f64,
    r: f64,
    dx: f64,
    inv_e1: f64,
    inv_e2: f64,
}

/// Which one-sided difference carries the gradient penalty.
#[derive(Clone, Copy, PartialEq)]
enum Side {
    None,
    Back,
    Fwd,
}

fn gradient_penalty(u: &[f64], i: usize, f: f64, dx: f64) -> (f64, Side) {
    let back = (u[i] - u[i - 1]) / dx - f;
    let fwd = (u[i] - u[i + 1]) / dx - f;
    if back <= 0.0 && fwd <= 0.0 {
        (0.0, Side::None)
    } else if back >= fwd {
        (back, Side::Back)
    } else {
        (fwd, Side::Fwd)
    }
}

impl Level<'_> {
    fn residual(&self, u: &[f64], out: &mut [f64]) {
        let n = u.len();
        for i in 1..n - 1 {
            let l = self.st.lo[i] * u[i - 1] - (self.st.lo[i] + self.st.up[i]) * u[i] + self.st.up[i] * u[i + 1];
            let (p, _) = gradient_penalty(u, i, self.f, self.dx);
            out[i] = self.c0 * u[i] + self.known[i] + l - self.r * u[i]
                + self.h[i]
                + self.inv_e1 * (self.g[i] - u[i]).max(0.0)
                - self.inv_e2 * p;
        }
    }

    /// Generalized Jacobian as (sub, diag, sup) over interior rows.
    fn jacobian(&self, u: &[f64], sub: &mut [f64], diag: &mut [f64], sup: &mut [f64]) {
        let n = u.len();
        for i in 1..n - 1 {
            let (lo, up) = (self.st.lo[i], self.st.up[i]);
            let mut d = self.c0 - lo - up - self.r;
            let mut a = lo;
            let mut c = up;
            if self.g[i] > u[i] {
                d -= self.inv_e1;
            }
            let k = self.inv_e2 / self.dx;
            match gradient_penalty(u, i, self.f, self.dx).1 {
                Side::None => {}
                Side::Back => {
                    d -= k;
                    a += k;
                }
                Side::Fwd => {
                    d -= k;
                    c += k;
                }
            }
            sub[i] = a;
            diag[i] = d;
            sup[i] = c;
        }
    }
}

/// Thomas algorithm over rows `1..n-1`; boundary entries of `x` stay zero.
fn solve_tridiagonal(sub: &[f64], diag: &[f64], sup: &[f64], rhs: &[f64], x: &mut [f64]) {
    let n = diag.len();
    let m = n - 2;
    let mut c = vec![0.0; m];
    let mut d = vec![0.0; m];
    for k in 0..m {
        let i = k + 1;
        let denom = if k == 0 { diag[i] } else { diag[i] - sub[i] * c[k - 1] };
        c[k] = if i + 1 < n - 1 { sup[i] / denom } else { 0.0 };
        d[k] = if k == 0 { rhs[i] / denom } else { (rhs[i] - sub[i] * d[k - 1]) / denom };
    }
    x[0] = 0.0;
    x[n - 1] = 0.0;
    for k in (0..m).rev() {
        x[k + 1] = if k + 1 < m { d[k] - c[k] * x[k + 2] } else { d[k] };
    }
}

fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn newton(level: &Level, u: &mut [f64], schedule: &PenaltySchedule, level_index: usize) -> Result<usize> {
    let n = u.len();
    let mut f = vec![0.0; n];
    let mut trial_f = vec![0.0; n];
    let (mut sub, mut diag, mut sup) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut delta = vec![0.0; n];
    let mut trial = u.to_vec();
    let worst = |f: &[f64]| {
        let (mut node, mut r) = (0, 0.0);
        for (i, v) in f.iter().enumerate().take(n - 1).skip(1) {
            if v.abs() > r {
                r = v.abs();
                node = i;
            }
        }
        (node, r)
    };
    for it in 1..=schedule.max_outer {
        level.residual(u, &mut f);
        let norm0 = sup_norm(&f[1..n - 1]);
        if norm0 == 0.0 {
            return Ok(it);
        }
        level.jacobian(u, &mut sub, &mut diag, &mut sup);
        let rhs: Vec<f64> = f.iter().map(|v| -v).collect();
        solve_tridiagonal(&sub, &diag, &sup, &rhs, &mut delta);
        if delta.iter().any(|v| !v.is_finite()) {
            let (node, residual) = worst(&f);
            return Err(Error::Solver { level: level_index, node, residual });
        }
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..=30 {
            for i in 1..n - 1 {
                trial[i] = u[i] + lambda * delta[i];
            }
            level.residual(&trial, &mut trial_f);
            if sup_norm(&trial_f[1..n - 1]) <= (1.0 - 1e-4 * lambda) * norm0 {
                accepted = true;
                break;
            }
            lambda *= 0.5;
        }
        let step = lambda * sup_norm(&delta);
        let scale = schedule.newton_tol * (1.0 + sup_norm(u));
        if !accepted {
            if sup_norm(&delta) <= scale {
                return Ok(it);
            }
            let (node, residual) = worst(&f);
            return Err(Error::Solver { level: level_index, node, residual });
        }
        u[1..n - 1].copy_from_slice(&trial[1..n - 1]);
        if step <= scale {
            return Ok(it);
        }
    }
    level.residual(u, &mut f);
    let (node, residual) = worst(&f);
    Err(Error::Solver { level: level_index, node, residual })
}

/// Newton from the warm start, then a penalty continuation when the kinks of the
/// two penalties stall the line search.
fn solve_level(level: &Level, u: &mut [f64], schedule: &PenaltySchedule, level_index: usize) -> Result<usize> {
    let start = u.to_vec();
    let err = match newton(level, u, schedule, level_index) {
        Ok(it) => return Ok(it),
        Err(e) => e,
    };
    u.copy_from_slice(&start);
    let mut total = 0;
    for j in (0..=6).rev() {
        let relax = 10f64.powi(j);
        let stepped = Level {
            inv_e1: level.inv_e1 / relax,
            inv_e2: level.inv_e2 / relax,
            ..*level
        };
        match newton(&stepped, u, schedule, level_index) {
            Ok(it) => total += it,
            Err(_) if j > 0 => continue,
            Err(_) => return Err(err),
        }
    }
    Ok(total)
}

fn check_game(spec: &GameSpec, gamma: f64) -> Result<()> {
    spec.check()?;
    if spec.d() != 1 {
        return Err(Error::Config(format!(
            "the grid solver handles d = 1 only, game has d = {}",
            spec.d()
        )));
    }
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::Config(format!("gamma must be positive for the grid solver, got {gamma}")));
    }
    Ok(())
}

/// Backward implicit sweep of the penalized equation, once per schedule stage.
pub fn solve_vi(spec: &GameSpec, gamma: f64, geometry: &GridSpec, schedule: &PenaltySchedule) -> Result<ValueGrid> {
    check_game(spec, gamma)?;
    geometry.check()?;
    schedule.check()?;
    let (m, nx) = (geometry.n_time, geometry.n_space + 1);
    let dx = 2.0 * geometry.half_width / geometry.n_space as f64;
    let t_nodes = geometry.time_nodes(spec.horizon);
    let x_nodes: Vec<f64> = (0..nx).map(|i| -geometry.half_width + i as f64 * dx).collect();
    let st = assemble(spec, gamma, &x_nodes, dx)?;
    let mut g = vec![0.0; (m + 1) * nx];
    let mut h = vec![0.0; (m + 1) * nx];
    for n in 0..=m {
        for i in 0..nx {
            let x = &x_nodes[i..=i];
            g[n * nx + i] = spec.g(t_nodes[n], x);
            h[n * nx + i] = spec.h(t_nodes[n], x);
        }
    }
    let f: Vec<f64> = t_nodes.iter().map(|&t| spec.f(t)).collect();

    let mut grid = ValueGrid {
        gamma,
        horizon: spec.horizon,
        geometry: *geometry,
        schedule: schedule.clone(),
        t_nodes,
        x_nodes,
        u: vec![0.0; (m + 1) * nx],
        grad: vec![0.0; (m + 1) * nx],
        residual: vec![0.0; (m + 1) * nx],
        regions: vec![Region::Continue; (m + 1) * nx],
        g,
        f,
        summary: ResidualSummary { max: 0.0, p99: 0.0, n_interior: 0 },
        stages: Vec::new(),
    };

    for stage in 0..schedule.n_stages() {
        let (e1, e2) = (schedule.eps_obstacle[stage], schedule.eps_gradient[stage]);
        let mut u = vec![0.0; (m + 1) * nx];
        u[m * nx..].copy_from_slice(&grid.g[m * nx..]);
        let mut iterations = 0;
        let mut known = vec![0.0; nx];
        for n in (0..m).rev() {
            let (c0, c1, c2) = time_weights(&grid.t_nodes, n, geometry.time_scheme);
            let (head, tail) = u.split_at_mut((n + 1) * nx);
            let next = &tail[..nx];
            for i in 0..nx {
                known[i] = c1 * next[i] + if c2 != 0.0 { c2 * tail[nx + i] } else { 0.0 };
            }
            let cur = &mut head[n * nx..];
            let gs = &grid.g[n * nx..(n + 1) * nx];
            cur.copy_from_slice(next);
            cur[0] = gs[0];
            cur[nx - 1] = gs[nx - 1];
            for i in 1..nx - 1 {
                cur[i] = cur[i].max(gs[i]);
            }
            let level = Level {
                st: &st,
                c0,
                known: &known,
                g: gs,
                h: &h[n * nx..(n + 1) * nx],
                f: grid.f[n],
                r: spec.discount,
                dx,
                inv_e1: 1.0 / e1,
                inv_e2: 1.0 / e2,
            };
            iterations += solve_level(&level, cur, schedule, n)?;
        }
        grid.u = u;
        let res = residual_field(&grid, spec, &st, &h);
        grid.stages.push(StageDiagnostics {
            eps_obstacle: e1,
            eps_gradient: e2,
            residual: res.summary,
            newton_iterations: iterations,
        });
        grid.residual = res.per_node;
        grid.summary = res.summary;
    }
    fill_gradient_and_regions(&mut grid);
    Ok(grid)
}

/// Largest one-sided slope in the direction `u` decreases away from node `i`,
/// the monotone gradient norm used by the penalty.
fn one_sided_norm(u: &[f64], i: usize, dx: f64) -> f64 {
    let back = (u[i] - u[i - 1]) / dx;
    let fwd = (u[i] - u[i + 1]) / dx;
    back.max(fwd).max(0.0)
}

fn fill_gradient_and_regions(grid: &mut ValueGrid) {
    let (nt, nx, dx) = (grid.n_t(), grid.n_x(), grid.dx());
    for n in 0..nt {
        let row = &grid.u[n * nx..(n + 1) * nx];
        for i in 0..nx {
            let d = if i == 0 {
                (row[1] - row[0]) / dx
            } else if i == nx - 1 {
                (row[i] - row[i - 1]) / dx
            } else {
                (row[i + 1] - row[i - 1]) / (2.0 * dx)
            };
            let k = n * nx + i;
            grid.grad[k] = d;
            let f = grid.f[n];
            grid.regions[k] = if row[i] - grid.g[k] <= grid.geometry.contact_tol {
                Region::Stop
            } else if i > 0 && i < nx - 1 && one_sided_norm(row, i, dx) >= f * (1.0 - grid.geometry.grad_tol) {
                Region::GradientActive
            } else {
                Region::Continue
            };
        }
    }
}

/// Per-node residual of both forms of the variational inequality.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualField {
    /// Zero outside the diagnostic interior.
    pub per_node: Vec<f64>,
    pub summary: ResidualSummary,
}

fn residual_field(grid: &ValueGrid, spec: &GameSpec, st: &Stencil, h: &[f64]) -> ResidualField {
    let (nt, nx, dx) = (grid.n_t(), grid.n_x(), grid.dx());
    let mut per_node = vec![0.0; nt * nx];
    let mut interior = Vec::new();
    for n in 0..nt - 1 {
        let (c0, c1, c2) = time_weights(&grid.t_nodes, n, grid.geometry.time_scheme);
        let row = &grid.u[n * nx..(n + 1) * nx];
        let next = &grid.u[(n + 1) * nx..(n + 2) * nx];
        let after = if c2 != 0.0 { &grid.u[(n + 2) * nx..(n + 3) * nx] } else { next };
        for i in 1..nx - 1 {
            if !grid.is_interior(n, i) {
                continue;
            }
            let k = n * nx + i;
            let l = st.lo[i] * row[i - 1] - (st.lo[i] + st.up[i]) * row[i] + st.up[i] * row[i + 1];
            let known = c1 * next[i] + if c2 != 0.0 { c2 * after[i] } else { 0.0 };
            let a = c0 * row[i] + known + l - spec.discount * row[i] + h[k];
            let b = grid.g[k] - row[i];
            let c = grid.f[n] - one_sided_norm(row, i, dx);
            let r = a.max(b).min(c).abs().max(a.min(c).max(b).abs());
            per_node[k] = r;
            interior.push(r);
        }
    }
    ResidualField { per_node, summary: summarize(interior) }
}

fn summarize(mut v: Vec<f64>) -> ResidualSummary {
    if v.is_empty() {
        return ResidualSummary { max: 0.0, p99: 0.0, n_interior: 0 };
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let k = ((0.99 * n as f64).ceil() as usize).clamp(1, n) - 1;
    ResidualSummary { max: v[n - 1], p99: v[k], n_interior: n }
}

/// Recompute the residual of a solved grid from the game's coefficients.
pub fn vi_residual(ug: &ValueGrid, spec: &GameSpec, gamma: f64) -> Result<ResidualField> {
    check_game(spec, gamma)?;
    let st = assemble(spec, gamma, &ug.x_nodes, ug.dx())?;
    let nx = ug.n_x();
    let mut h = vec![0.0; ug.n_t() * nx];
    for (n, &t) in ug.t_nodes.iter().enumerate() {
        for i in 0..nx {
            h[n * nx + i] = spec.h(t, &ug.x_nodes[i..=i]);
        }
    }
    Ok(residual_field(ug, spec, &st, &h))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientReport {
    /// `max |grad u| / f(t)` over the diagnostic interior.
    pub max_ratio: f64,
    pub witness_t: f64,
    pub witness_x: f64,
    pub grad_tol: f64,
    pub n_gradient_active: usize,
    pub pass: bool,
}

pub fn gradient_bound_check(ug: &ValueGrid, grad_tol: f64) -> GradientReport {
    let mut best = (0.0, 0.0, 0.0);
    let mut active = 0;
    for n in 0..ug.n_t() {
        for i in 0..ug.n_x() {
            if !ug.is_interior_x(i) {
                continue;
            }
            let k = ug.idx(n, i);
            if ug.regions[k] == Region::GradientActive {
                active += 1;
            }
            let ratio = ug.grad[k].abs() / ug.f[n];
            if ratio > best.0 {
                best = (ratio, ug.t_nodes[n], ug.x_nodes[i]);
            }
        }
    }
    GradientReport {
        max_ratio: best.0,
        witness_t: best.1,
        witness_x: best.2,
        grad_tol,
        n_gradient_active: active,
        pass: best.0 <= 1.0 + grad_tol,
    }
}

/// Mask of nodes with `u - g <= tol`; the terminal slice is always included.
pub fn extract_contact_set(ug: &ValueGrid, tol: f64) -> Vec<bool> {
    let last = ug.n_t() - 1;
    (0..ug.n_t() * ug.n_x())
        .map(|k| k / ug.n_x() == last || ug.u[k] - ug.g[k] <= tol)
        .collect()
}

/// `sup |a - b|` over the diagnostic interior of two grids of one geometry.
pub fn sup_interior_difference(a: &ValueGrid, b: &ValueGrid) -> Result<f64> {
    if a.t_nodes != b.t_nodes || a.x_nodes != b.x_nodes {
        return Err(Error::GridMismatch("value grids are not on the same lattice".into()));
    }
    let mut m: f64 = 0.0;
    for n in 0..a.n_t() {
        for i in 0..a.n_x() {
            if a.is_interior_x(i) {
                m = m.max((a.u_at(n, i) - b.u_at(n, i)).abs());
            }
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::{CostFn, DiffusionField, PayoffFn};
    use crate::game::tests::still_spec;

    fn quick() -> GridSpec {
        GridSpec::new(40, 80, 2.0)
    }

    #[test]
    fn constant_obstacle() {
        let spec = still_spec(PayoffFn::Constant { value: 0.7 }, PayoffFn::Zero, 0.0, 1.0);
        let ug = solve_vi(&spec, 0.5, &quick(), &PenaltySchedule::default()).unwrap();
        assert!(ug.u.iter().all(|&v| (v - 0.7).abs() < 1e-12));
        assert!(ug.summary.max < 1e-10);
        assert_eq!(gradient_bound_check(&ug, 0.02).max_ratio, 0.0);
        assert!(extract_contact_set(&ug, 1e-9).iter().all(|&b| b));
    }

    #[test]
    fn running_reward_waits_to_horizon() {
        let spec = still_spec(PayoffFn::Zero, PayoffFn::Constant { value: 0.3 }, 0.0, 1e6);
        // small gamma and a wide box keep the lateral condition out of the interior
        let ug = solve_vi(&spec, 0.05, &GridSpec::new(40, 80, 4.0), &PenaltySchedule::default()).unwrap();
        for n in 0..ug.n_t() {
            for i in 0..ug.n_x() {
                if ug.is_interior_x(i) {
                    let exact = 0.3 * (1.0 - ug.t_nodes[n]);
                    assert!((ug.u_at(n, i) - exact).abs() < 1e-6, "{n} {i}");
                }
            }
        }
        assert!(ug.summary.max < 1e-6);
        let mask = extract_contact_set(&ug, 1e-9);
        for n in 0..ug.n_t() {
            for i in 0..ug.n_x() {
                if ug.is_interior_x(i) {
                    assert_eq!(mask[ug.idx(n, i)], n + 1 == ug.n_t());
                }
            }
        }
    }

    #[test]
    fn terminal_slice_is_obstacle() {
        let spec = still_spec(PayoffFn::Put { strike: 1.0, scale: 1.0 }, PayoffFn::Zero, 0.0, 1e6);
        let ug = solve_vi(&spec, 0.25, &quick(), &PenaltySchedule::default()).unwrap();
        let last = ug.n_t() - 1;
        for i in 0..ug.n_x() {
            assert_eq!(ug.u_at(last, i), spec.g(1.0, &[ug.x_nodes[i]]));
        }
        assert!(ug.u.iter().zip(&ug.g).all(|(u, g)| *u >= g - 1e-5));
    }

    #[test]
    fn saturated_gradient_ratio_is_one() {
        let spec = still_spec(PayoffFn::Abs { scale: 0.5, center: None }, PayoffFn::Zero, 0.0, 0.5);
        let ug = solve_vi(&spec, 0.25, &quick(), &PenaltySchedule::default()).unwrap();
        let rep = gradient_bound_check(&ug, 0.02);
        assert!((rep.max_ratio - 1.0).abs() < 0.02, "{rep:?}");
        assert!(rep.pass);
    }

    #[test]
    fn symmetric_game_gives_even_value() {
        let mut spec = still_spec(PayoffFn::CappedAbs { scale: 1.0, cap: 1.0 }, PayoffFn::Zero, 0.1, 2.0);
        spec.diffusion = DiffusionField::Constant { matrix: vec![vec![0.3]] };
        let ug = solve_vi(&spec, 0.25, &quick(), &PenaltySchedule::default()).unwrap();
        let nx = ug.n_x();
        for n in 0..ug.n_t() {
            for i in 0..nx {
                assert!((ug.u_at(n, i) - ug.u_at(n, nx - 1 - i)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn gradient_penalty_caps_slope() {
        // waiting is rewarded below x = 1, so u would rise faster than the cost allows
        let mut spec = still_spec(PayoffFn::Zero, PayoffFn::Put { strike: 1.0, scale: 1.0 }, 0.0, 0.2);
        spec.payoffs.f = CostFn::Constant { value: 0.2 };
        let ug = solve_vi(&spec, 0.25, &GridSpec::new(50, 120, 3.0), &PenaltySchedule::default()).unwrap();
        let rep = gradient_bound_check(&ug, 0.02);
        assert!(rep.pass, "{rep:?}");
        assert!(rep.n_gradient_active > 0);
        assert!(ug.summary.p99 < 1e-2, "{:?}", ug.summary);
    }

    #[test]
    fn recomputed_residual_matches_solver() {
        let mut spec = still_spec(PayoffFn::Put { strike: 1.0, scale: 1.0 }, PayoffFn::Zero, 0.2, 1e6);
        spec.diffusion = DiffusionField::Constant { matrix: vec![vec![0.4]] };
        let ug = solve_vi(&spec, 0.1, &quick(), &PenaltySchedule::default()).unwrap();
        let res = vi_residual(&ug, &spec, 0.1).unwrap();
        for (k, (a, b)) in res.per_node.iter().zip(&ug.residual).enumerate() {
            assert!(a == b, "{k}: {a} {b}");
        }
        assert_eq!(res.summary, ug.summary);
        assert_eq!(res.per_node, ug.residual);
    }

    #[test]
    fn rejects_bad_inputs() {
        let spec = still_spec(PayoffFn::Zero, PayoffFn::Zero, 0.0, 1.0);
        assert!(solve_vi(&spec, 0.0, &quick(), &PenaltySchedule::default()).unwrap_err().is_config());
        let mut bad = PenaltySchedule::default();
        bad.eps_obstacle = vec![1e-4, 1e-2, 1e-6];
        assert!(solve_vi(&spec, 0.1, &quick(), &bad).unwrap_err().is_config());
        let mut spec2 = spec.clone();
        spec2.dims.state = 2;
        assert!(solve_vi(&spec2, 0.1, &quick(), &PenaltySchedule::default()).is_err());
    }

    #[test]
    fn bundle_round_trip() {
        let spec = still_spec(PayoffFn::Put { strike: 1.0, scale: 1.0 }, PayoffFn::Zero, 0.0, 1e6);
        let ug = solve_vi(&spec, 0.25, &GridSpec::new(10, 20, 2.0), &PenaltySchedule::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ug.write_bundle(dir.path(), "put", Some("# config_hash=abc,seed=1")).unwrap();
        let back = ValueGrid::read_bundle(dir.path(), "put").unwrap();
        assert_eq!(back, ug);
    }

    #[test]
    fn interpolation_reproduces_nodes_and_counts_clamps() {
        let spec = still_spec(PayoffFn::Put { strike: 1.0, scale: 1.0 }, PayoffFn::Zero, 0.0, 1e6);
        let ug = solve_vi(&spec, 0.25, &GridSpec::new(10, 20, 2.0), &PenaltySchedule::default()).unwrap();
        let field = GridField::new(&ug);
        for n in 0..ug.n_t() {
            for i in 0..ug.n_x() {
                assert!((field.eval(ug.t_nodes[n], &[ug.x_nodes[i]]) - ug.u_at(n, i)).abs() < 1e-12);
            }
        }
        assert_eq!(field.extrapolations(), 0);
        let clamped = field.eval(0.0, &[5.0]);
        assert_eq!(clamped, ug.u_at(0, ug.n_x() - 1));
        assert_eq!(field.extrapolations(), 1);
    }
}
