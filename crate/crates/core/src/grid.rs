use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform time grid `0 = s_0 < s_1 < ... < s_N = horizon`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub n_steps: usize,
    pub dt: f64,
}

impl TimeGrid {
    pub fn new(n_steps: usize, dt: f64) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::Config("time grid needs at least one step".into()));
        }
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::Config(format!("time step must be positive, got {dt}")));
        }
        Ok(Self { n_steps, dt })
    }

    /// Grid covering `[0, horizon]` with `n_steps` equal steps.
    pub fn over(horizon: f64, n_steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::Config(format!("horizon must be positive, got {horizon}")));
        }
        Self::new(n_steps, horizon / n_steps as f64)
    }

    /// Grid with step as close as possible to `dt` that lands exactly on `horizon`.
    pub fn with_step(horizon: f64, dt: f64) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::Config(format!("time step must be positive, got {dt}")));
        }
        let n = (horizon / dt).round().max(1.0) as usize;
        Self::over(horizon, n)
    }

    pub fn n_nodes(&self) -> usize {
        self.n_steps + 1
    }

    pub fn horizon(&self) -> f64 {
        self.n_steps as f64 * self.dt
    }

    pub fn time(&self, node: usize) -> f64 {
        node as f64 * self.dt
    }

    /// Index of the node at time `s`, or `OffGrid` when `s` is not a node.
    pub fn node_of(&self, s: f64) -> Result<usize> {
        let k = (s / self.dt).round();
        let off = (k * self.dt - s).abs();
        if k < 0.0 || k as usize > self.n_steps || off > 1e-9 * self.dt.max(s.abs()).max(1.0) {
            return Err(Error::OffGrid { time: s, dt: self.dt });
        }
        Ok(k as usize)
    }

    pub fn same_as(&self, other: &TimeGrid) -> bool {
        self.n_steps == other.n_steps && (self.dt - other.dt).abs() <= 1e-14 * self.dt
    }

    pub fn ensure_same(&self, other: &TimeGrid, what: &str) -> Result<()> {
        if self.same_as(other) {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "{what}: {} steps of {} vs {} steps of {}",
                self.n_steps, self.dt, other.n_steps, other.dt
            )))
        }
    }
}
