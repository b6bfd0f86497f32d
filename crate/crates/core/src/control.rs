//! Singular control pairs `(n, nu)` on a time grid.

use serde::{Deserialize, Serialize};

use crate::coeffs::norm;
use crate::error::{Error, Result};
use crate::game::GameSpec;
use crate::grid::TimeGrid;
use crate::rng::BrownianDriver;
use crate::sde::Stepper;

const UNIT_TOL: f64 = 1e-12;

/// A discretized control: direction per node, continuous increments per step,
/// and atoms (jumps) snapped to nodes.
///
/// `increments[k]` is the absolutely continuous part of `nu` accrued over
/// `(s_{k-1}, s_k]` (so `increments[0] == 0`). Atoms are the only source of
/// a difference between a path's value and its left limit.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlPath {
    pub grid: TimeGrid,
    pub dim: usize,
    directions: Vec<f64>,
    pub increments: Vec<f64>,
    /// `(node, size)`, sorted by node, one entry per node at most.
    pub atoms: Vec<(usize, f64)>,
    /// Running `nu_{s_k}`, including any time-0 atom.
    pub total: Vec<f64>,
}

impl ControlPath {
    pub fn new(
        grid: TimeGrid,
        directions: Vec<f64>,
        increments: Vec<f64>,
        mut atoms: Vec<(usize, f64)>,
    ) -> Result<Self> {
        let n = grid.n_nodes();
        if increments.len() != n || directions.is_empty() || !directions.len().is_multiple_of(n) {
            return Err(Error::GridMismatch(format!(
                "control arrays do not match a grid with {n} nodes"
            )));
        }
        let dim = directions.len() / n;
        for k in 0..n {
            let dir = &directions[k * dim..(k + 1) * dim];
            if (norm(dir) - 1.0).abs() > UNIT_TOL {
                return Err(Error::Config(format!("direction at node {k} is not a unit vector")));
            }
        }
        if increments[0] != 0.0 {
            return Err(Error::Invariant("continuous increment at node 0 must be zero".into()));
        }
        if let Some(k) = increments.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Invariant(format!("negative or non-finite increment at step {k}")));
        }
        atoms.sort_by_key(|a| a.0);
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(atoms.len());
        for (node, size) in atoms {
            if node >= n {
                return Err(Error::OffGrid { time: grid.time(node), dt: grid.dt });
            }
            if !(size.is_finite() && size >= 0.0) {
                return Err(Error::Config(format!("negative jump size {size} at node {node}")));
            }
            match merged.last_mut() {
                Some(last) if last.0 == node => last.1 += size,
                _ => merged.push((node, size)),
            }
        }
        merged.retain(|a| a.1 > 0.0);
        let mut total = vec![0.0; n];
        let mut acc = 0.0;
        let mut it = merged.iter().peekable();
        for k in 0..n {
            acc += increments[k];
            if let Some(&&(node, size)) = it.peek() {
                if node == k {
                    acc += size;
                    it.next();
                }
            }
            total[k] = acc;
        }
        Ok(Self { grid, dim, directions, increments, atoms: merged, total })
    }

    /// The null control with direction `e_1`.
    pub fn zero(grid: TimeGrid, dim: usize) -> Self {
        let mut dir = vec![0.0; dim];
        dir[0] = 1.0;
        Self::new(grid, dir.repeat(grid.n_nodes()), vec![0.0; grid.n_nodes()], Vec::new())
            .expect("null control is well formed")
    }

    pub fn direction(&self, k: usize) -> &[f64] {
        &self.directions[k * self.dim..(k + 1) * self.dim]
    }

    /// Rate of the continuous part over step `(s_{k-1}, s_k]`.
    pub fn density(&self, k: usize) -> f64 {
        self.increments[k] / self.grid.dt
    }

    pub fn atom_at(&self, k: usize) -> f64 {
        match self.atoms.binary_search_by_key(&k, |a| a.0) {
            Ok(i) => self.atoms[i].1,
            Err(_) => 0.0,
        }
    }

    pub fn terminal_total(&self) -> f64 {
        *self.total.last().unwrap()
    }

    pub fn has_atoms(&self) -> bool {
        !self.atoms.is_empty()
    }
}

/// Parametric control families used by the experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ControlFamily {
    Zero,
    /// `dnu = rate ds` along a fixed direction.
    ConstantDensity { rate: f64, direction: Vec<f64> },
    /// Minimal push along `direction` keeping `<n, X> >= <n, barrier |n|>`
    /// (for `n = -e_1` this keeps `x_1 <= barrier`). Discrete Skorokhod map.
    ReflectAt { barrier: f64, direction: Vec<f64> },
    /// Single atom of `size` at time `time`.
    JumpAt { time: f64, size: f64, direction: Vec<f64> },
    /// One atom of `size` at the first node where `<n, X_{s-}> <= level`.
    ThresholdPush { level: f64, size: f64, direction: Vec<f64> },
}

impl ControlFamily {
    pub fn is_feedback(&self) -> bool {
        matches!(self, ControlFamily::ReflectAt { .. } | ControlFamily::ThresholdPush { .. })
    }

    fn direction_or_e1(&self, dim: usize) -> Result<Vec<f64>> {
        let dir = match self {
            ControlFamily::Zero => {
                let mut e = vec![0.0; dim];
                e[0] = 1.0;
                e
            }
            ControlFamily::ConstantDensity { direction, .. }
            | ControlFamily::ReflectAt { direction, .. }
            | ControlFamily::JumpAt { direction, .. }
            | ControlFamily::ThresholdPush { direction, .. } => direction.clone(),
        };
        if dir.len() != dim {
            return Err(Error::Config(format!("control direction must have {dim} entries")));
        }
        if (norm(&dir) - 1.0).abs() > UNIT_TOL {
            return Err(Error::Config("control direction must be a unit vector".into()));
        }
        Ok(dir)
    }
}

/// Build an open-loop control on `grid`. Feedback families need a simulated
/// state and go through [`realize_control`] instead.
pub fn make_control(family: &ControlFamily, grid: TimeGrid) -> Result<ControlPath> {
    let dim = match family {
        ControlFamily::Zero => 1,
        ControlFamily::ConstantDensity { direction, .. }
        | ControlFamily::ReflectAt { direction, .. }
        | ControlFamily::JumpAt { direction, .. }
        | ControlFamily::ThresholdPush { direction, .. } => direction.len(),
    };
    make_control_dim(family, grid, dim)
}

fn make_control_dim(family: &ControlFamily, grid: TimeGrid, dim: usize) -> Result<ControlPath> {
    let dir = family.direction_or_e1(dim)?;
    let n = grid.n_nodes();
    let directions = dir.repeat(n);
    match family {
        ControlFamily::Zero => ControlPath::new(grid, directions, vec![0.0; n], Vec::new()),
        ControlFamily::ConstantDensity { rate, .. } => {
            if !(rate.is_finite() && *rate >= 0.0) {
                return Err(Error::Config(format!("density rate must be nonnegative, got {rate}")));
            }
            let mut inc = vec![rate * grid.dt; n];
            inc[0] = 0.0;
            ControlPath::new(grid, directions, inc, Vec::new())
        }
        ControlFamily::JumpAt { time, size, .. } => {
            if *size < 0.0 {
                return Err(Error::Config(format!("negative jump size {size}")));
            }
            let node = grid.node_of(*time)?;
            ControlPath::new(grid, directions, vec![0.0; n], vec![(node, *size)])
        }
        ControlFamily::ReflectAt { .. } | ControlFamily::ThresholdPush { .. } => Err(Error::Config(
            "feedback control families need a simulated state; use realize_control".into(),
        )),
    }
}

/// Realize a control family along the dynamics driven by `driver` with
/// perturbation level `gamma`. Open-loop families ignore the state.
pub fn realize_control(
    family: &ControlFamily,
    spec: &GameSpec,
    driver: &BrownianDriver,
    gamma: f64,
    x0: &[f64],
) -> Result<ControlPath> {
    let d = spec.d();
    if x0.len() != d {
        return Err(Error::Config(format!("initial point must have {d} entries")));
    }
    if !family.is_feedback() {
        return make_control_dim(family, driver.grid, d);
    }
    let grid = driver.grid;
    let n = grid.n_nodes();
    let dir = family.direction_or_e1(d)?;
    let along = |x: &[f64]| dir.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    let mut stepper = Stepper::new(spec);
    let mut increments = vec![0.0; n];
    let mut atoms = Vec::new();
    let mut x = x0.to_vec();
    let mut pre = vec![0.0; d];
    match family {
        ControlFamily::ReflectAt { barrier, .. } => {
            if !barrier.is_finite() {
                return Err(Error::Config("reflection barrier must be finite".into()));
            }
            let level: f64 = dir.iter().map(|n| n * barrier * n.abs()).sum();
            let push0 = (level - along(&x)).max(0.0);
            if push0 > 0.0 {
                atoms.push((0, push0));
                for (xi, ni) in x.iter_mut().zip(&dir) {
                    *xi += ni * push0;
                }
            }
            for k in 1..n {
                stepper.advance(&x, driver, k, gamma, &mut pre)?;
                let push = (level - along(&pre)).max(0.0);
                increments[k] = push;
                for i in 0..d {
                    x[i] = pre[i] + dir[i] * push;
                }
            }
        }
        ControlFamily::ThresholdPush { level, size, .. } => {
            if !(size.is_finite() && *size >= 0.0) {
                return Err(Error::Config(format!("negative jump size {size}")));
            }
            if along(&x) <= *level {
                atoms.push((0, *size));
            } else {
                for k in 1..n {
                    stepper.advance(&x, driver, k, gamma, &mut pre)?;
                    if along(&pre) <= *level {
                        atoms.push((k, *size));
                        break;
                    }
                    x.copy_from_slice(&pre);
                }
            }
        }
        _ => unreachable!("open-loop handled above"),
    }
    ControlPath::new(grid, dir.repeat(n), increments, atoms)
}

/// Monte Carlo check of the restricted class bound `E[nu_T] <= k2 (1 + |x|)`.
pub fn check_control_class(controls: &[ControlPath], k2: f64, x0: &[f64]) -> Result<f64> {
    let totals: Vec<f64> = controls.iter().map(|c| c.terminal_total()).collect();
    check_class_totals(&totals, k2, x0)
}

/// As [`check_control_class`], from sampled terminal totals `nu_T`.
pub fn check_class_totals(totals: &[f64], k2: f64, x0: &[f64]) -> Result<f64> {
    if totals.is_empty() {
        return Err(Error::EmptySamples("no controls to check".into()));
    }
    let mean = totals.iter().sum::<f64>() / totals.len() as f64;
    let bound = k2 * (1.0 + norm(x0));
    if mean > bound {
        return Err(Error::ControlClass(format!(
            "mean terminal control {mean} exceeds K2 (1 + |x|) = {bound}"
        )));
    }
    Ok(mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::{CostFn, DiffusionField, DriftField, PayoffFn};
    use crate::game::{AssumptionProfile, Dims, GameSpec, Payoffs, ProfileVariant, SigmaStructure};
    use crate::sde::simulate_controlled;

    fn bm_spec() -> GameSpec {
        GameSpec {
            dims: Dims { state: 1, noise: 1 },
            horizon: 1.0,
            discount: 0.0,
            drift: DriftField::Zero,
            diffusion: DiffusionField::Constant { matrix: vec![vec![1.0]] },
            payoffs: Payoffs { f: CostFn::Constant { value: 1.0 }, g: PayoffFn::Zero, h: PayoffFn::Zero },
            profile: AssumptionProfile {
                variant: ProfileVariant::A22Sublinear,
                d1: 1.0,
                d2: None,
                d3: 1.0,
                k1: 1.0,
                k2: 1.0,
                k5: 1.0,
                sigma_structure: SigmaStructure::SeparableIa,
                beta: 0.0,
            },
        }
    }

    #[test]
    fn zero_and_jump() {
        let grid = TimeGrid::over(1.0, 100).unwrap();
        let z = make_control(&ControlFamily::Zero, grid).unwrap();
        assert_eq!(z.terminal_total(), 0.0);
        let j = make_control(&ControlFamily::JumpAt { time: 0.0, size: 0.3, direction: vec![1.0] }, grid).unwrap();
        assert_eq!(j.atoms, vec![(0, 0.3)]);
        assert_eq!(j.total[0], 0.3);
        assert_eq!(j.terminal_total(), 0.3);
    }

    #[test]
    fn rejects_bad_inputs() {
        let grid = TimeGrid::over(1.0, 100).unwrap();
        assert!(make_control(&ControlFamily::JumpAt { time: 0.0, size: -1.0, direction: vec![1.0] }, grid).is_err());
        assert!(make_control(&ControlFamily::ConstantDensity { rate: 1.0, direction: vec![0.5, 0.5] }, grid).is_err());
        assert!(make_control(&ControlFamily::ReflectAt { barrier: 0.0, direction: vec![1.0] }, grid).is_err());
    }

    #[test]
    fn total_is_non_decreasing() {
        let grid = TimeGrid::over(1.0, 50).unwrap();
        let c = ControlPath::new(grid, vec![1.0; 51], {
            let mut v = vec![0.01; 51];
            v[0] = 0.0;
            v
        }, vec![(10, 0.5), (0, 0.2), (10, 0.1)])
        .unwrap();
        assert_eq!(c.atoms, vec![(0, 0.2), (10, 0.6)]);
        assert!(c.total.windows(2).all(|w| w[1] >= w[0]));
        assert!((c.terminal_total() - (0.8 + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn reflection_matches_running_maximum() {
        // X = x + W - nu with nu_s = max(0, sup_{u <= s} (x + W_u))
        let spec = bm_spec();
        let grid = TimeGrid::over(1.0, 2000).unwrap();
        for (seed, x) in [(1u64, -0.3), (2, 0.0), (3, 0.4)] {
            let driver = BrownianDriver::generate(seed, 0, grid, 1, 1);
            let fam = ControlFamily::ReflectAt { barrier: 0.0, direction: vec![-1.0] };
            let c = realize_control(&fam, &spec, &driver, 0.0, &[x]).unwrap();
            let mut w = 0.0;
            let mut run_max = x;
            for k in 0..grid.n_nodes() {
                if k > 0 {
                    w += driver.dw(k)[0];
                }
                run_max = run_max.max(x + w);
                let oracle = run_max.max(0.0);
                assert!((c.total[k] - oracle).abs() < 1e-12, "node {k}: {} vs {oracle}", c.total[k]);
            }
            let path = simulate_controlled(&spec, &c, &driver, 0.0, &[x]).unwrap();
            assert!(path.values.iter().all(|v| *v <= 1e-12));
        }
    }

    #[test]
    fn threshold_push_fires_once() {
        let spec = bm_spec();
        let grid = TimeGrid::over(1.0, 1000).unwrap();
        let driver = BrownianDriver::generate(5, 0, grid, 1, 1);
        let fam = ControlFamily::ThresholdPush { level: 0.5, size: 0.25, direction: vec![1.0] };
        let c = realize_control(&fam, &spec, &driver, 0.0, &[0.2]).unwrap();
        assert_eq!(c.atoms, vec![(0, 0.25)]);
        let c = realize_control(&fam, &spec, &driver, 0.0, &[0.9]).unwrap();
        assert!(c.atoms.len() <= 1);
        if let Some(&(k, _)) = c.atoms.first() {
            let path = simulate_controlled(&spec, &c, &driver, 0.0, &[0.9]).unwrap();
            assert!(path.pre_value(k)[0] <= 0.5);
            assert!(path.jump_flags[k]);
            assert!((1..k).all(|i| path.value(i)[0] > 0.5));
        }
    }

    #[test]
    fn class_bound() {
        let grid = TimeGrid::over(1.0, 10).unwrap();
        let big = make_control(&ControlFamily::JumpAt { time: 0.0, size: 5.0, direction: vec![1.0] }, grid).unwrap();
        assert!(matches!(check_control_class(&[big.clone()], 1.0, &[0.0]), Err(Error::ControlClass(_))));
        assert!(check_control_class(&[big], 10.0, &[0.0]).is_ok());
    }
}
