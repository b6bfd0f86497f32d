//! Parametric coefficient and payoff families.
//!
//! Everything here serializes as a tagged JSON object (`{"kind": ...}`) so a
//! game can be described in a config file without an expression parser.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mollify::{MollifiedCost, MollifiedField};

pub(crate) fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn interp_table(nodes: &[f64], values: &[f64], x: f64) -> f64 {
    if x <= nodes[0] {
        return values[0];
    }
    let last = nodes.len() - 1;
    if x >= nodes[last] {
        return values[last];
    }
    let k = nodes.partition_point(|&n| n <= x).max(1) - 1;
    let w = (x - nodes[k]) / (nodes[k + 1] - nodes[k]);
    values[k] * (1.0 - w) + values[k + 1] * w
}

fn check_table(nodes: &[f64], values: &[f64], what: &str) -> Result<()> {
    if nodes.len() < 2 || nodes.len() != values.len() {
        return Err(Error::Config(format!(
            "{what}: tabulated field needs >= 2 nodes and matching values"
        )));
    }
    if nodes.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config(format!("{what}: table nodes must increase strictly")));
    }
    Ok(())
}

/// Drift `b: R^d -> R^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DriftField {
    Zero,
    /// `b(x) = A x + c`.
    Affine { matrix: Vec<Vec<f64>>, offset: Vec<f64> },
    /// One-dimensional table, linearly interpolated and held constant outside.
    Tabulated { nodes: Vec<f64>, values: Vec<f64> },
}

impl DriftField {
    pub fn eval(&self, x: &[f64], out: &mut [f64]) {
        match self {
            DriftField::Zero => out.fill(0.0),
            DriftField::Affine { matrix, offset } => {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = offset[i] + matrix[i].iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            DriftField::Tabulated { nodes, values } => out[0] = interp_table(nodes, values, x[0]),
        }
    }

    pub fn eval_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.eval(x, &mut out);
        out
    }

    pub(crate) fn check(&self, d: usize) -> Result<()> {
        match self {
            DriftField::Zero => Ok(()),
            DriftField::Affine { matrix, offset } => {
                if matrix.len() != d || offset.len() != d || matrix.iter().any(|r| r.len() != d) {
                    return Err(Error::Config(format!("drift: affine field must be {d}x{d} plus offset of length {d}")));
                }
                Ok(())
            }
            DriftField::Tabulated { nodes, values } => {
                if d != 1 {
                    return Err(Error::Config("drift: tabulated fields are one-dimensional".into()));
                }
                check_table(nodes, values, "drift")
            }
        }
    }
}

/// Diffusion `sigma: R^d -> R^{d x d'}`, written row-major into `out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DiffusionField {
    Zero,
    Constant { matrix: Vec<Vec<f64>> },
    /// Diagonal, `sigma_ii(x) = scale_i (1 + |x_i|)^{1/2}`; separable with square-root growth.
    SqrtGrowthDiag { scale: Vec<f64> },
    /// Diagonal, `sigma_ii(x) = offset_i + scale_i x_i`; separable, linear growth.
    LinearDiag { scale: Vec<f64>, offset: Vec<f64> },
    /// `sigma(x) = (offset + scale |x|) I`; couples coordinates through the norm.
    NormLinear { scale: f64, offset: f64 },
    /// One-dimensional table for `sigma_11`.
    Tabulated { nodes: Vec<f64>, values: Vec<f64> },
}

impl DiffusionField {
    pub fn eval(&self, x: &[f64], noise_dim: usize, out: &mut [f64]) {
        let d = x.len();
        match self {
            DiffusionField::Zero => out.fill(0.0),
            DiffusionField::Constant { matrix } => {
                for i in 0..d {
                    out[i * noise_dim..(i + 1) * noise_dim].copy_from_slice(&matrix[i]);
                }
            }
            DiffusionField::SqrtGrowthDiag { scale } => {
                out.fill(0.0);
                for i in 0..d {
                    out[i * noise_dim + i] = scale[i] * (1.0 + x[i].abs()).sqrt();
                }
            }
            DiffusionField::LinearDiag { scale, offset } => {
                out.fill(0.0);
                for i in 0..d {
                    out[i * noise_dim + i] = offset[i] + scale[i] * x[i];
                }
            }
            DiffusionField::NormLinear { scale, offset } => {
                out.fill(0.0);
                let s = offset + scale * norm(x);
                for i in 0..d {
                    out[i * noise_dim + i] = s;
                }
            }
            DiffusionField::Tabulated { nodes, values } => {
                out[0] = interp_table(nodes, values, x[0]);
            }
        }
    }

    pub fn eval_vec(&self, x: &[f64], noise_dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; x.len() * noise_dim];
        self.eval(x, noise_dim, &mut out);
        out
    }

    pub(crate) fn check(&self, d: usize, noise_dim: usize) -> Result<()> {
        let diag = |len: usize, what: &str| {
            if noise_dim != d || len != d {
                Err(Error::Config(format!(
                    "diffusion: {what} needs d' = d and {d} entries"
                )))
            } else {
                Ok(())
            }
        };
        match self {
            DiffusionField::Zero => Ok(()),
            DiffusionField::Constant { matrix } => {
                if matrix.len() != d || matrix.iter().any(|r| r.len() != noise_dim) {
                    return Err(Error::Config(format!("diffusion: constant matrix must be {d}x{noise_dim}")));
                }
                Ok(())
            }
            DiffusionField::SqrtGrowthDiag { scale } => diag(scale.len(), "sqrt_growth_diag"),
            DiffusionField::LinearDiag { scale, offset } => {
                diag(scale.len(), "linear_diag")?;
                diag(offset.len(), "linear_diag")
            }
            DiffusionField::NormLinear { .. } => diag(d, "norm_linear"),
            DiffusionField::Tabulated { nodes, values } => {
                if d != 1 || noise_dim != 1 {
                    return Err(Error::Config("diffusion: tabulated fields need d = d' = 1".into()));
                }
                check_table(nodes, values, "diffusion")
            }
        }
    }
}

/// Time-homogeneous payoff `g` or `h`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PayoffFn {
    Zero,
    Constant { value: f64 },
    /// `scale * (strike - x_1)^+`.
    Put { strike: f64, scale: f64 },
    /// `scale * (x_1 - strike)^+`.
    Call { strike: f64, scale: f64 },
    /// `scale * |x - center|`.
    Abs {
        scale: f64,
        #[serde(default)]
        center: Option<Vec<f64>>,
    },
    /// `min(scale * |x|, cap)`.
    CappedAbs { scale: f64, cap: f64 },
    /// `scale * (sqrt(|x|^2 + eps^2) - eps)`, a smooth stand-in for `scale * |x|`.
    SmoothAbs { scale: f64, eps: f64 },
    /// `<weights, x> + offset`.
    Linear { weights: Vec<f64>, offset: f64 },
    /// `scale * |x|^2`.
    Quadratic { scale: f64 },
    /// One-dimensional table along `x_1`.
    Tabulated { nodes: Vec<f64>, values: Vec<f64> },
    Mollified(Box<MollifiedField>),
}

impl PayoffFn {
    pub fn eval(&self, t: f64, x: &[f64]) -> f64 {
        match self {
            PayoffFn::Zero => 0.0,
            PayoffFn::Constant { value } => *value,
            PayoffFn::Put { strike, scale } => scale * (strike - x[0]).max(0.0),
            PayoffFn::Call { strike, scale } => scale * (x[0] - strike).max(0.0),
            PayoffFn::Abs { scale, center } => match center {
                None => scale * norm(x),
                Some(c) => {
                    scale * x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
                }
            },
            PayoffFn::CappedAbs { scale, cap } => (scale * norm(x)).min(*cap),
            PayoffFn::SmoothAbs { scale, eps } => {
                let r2 = x.iter().map(|v| v * v).sum::<f64>();
                scale * ((r2 + eps * eps).sqrt() - eps)
            }
            PayoffFn::Linear { weights, offset } => {
                offset + weights.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            }
            PayoffFn::Quadratic { scale } => scale * x.iter().map(|v| v * v).sum::<f64>(),
            PayoffFn::Tabulated { nodes, values } => interp_table(nodes, values, x[0]),
            PayoffFn::Mollified(m) => m.eval(t, x),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, PayoffFn::Zero)
    }

    pub(crate) fn check(&self, d: usize, what: &str) -> Result<()> {
        match self {
            PayoffFn::Abs { center: Some(c), .. } if c.len() != d => {
                Err(Error::Config(format!("{what}: center must have {d} entries")))
            }
            PayoffFn::Linear { weights, .. } if weights.len() != d => {
                Err(Error::Config(format!("{what}: weights must have {d} entries")))
            }
            PayoffFn::SmoothAbs { eps, .. } if *eps <= 0.0 => {
                Err(Error::Config(format!("{what}: smooth_abs needs eps > 0")))
            }
            PayoffFn::Tabulated { nodes, values } => {
                if d != 1 {
                    return Err(Error::Config(format!("{what}: tabulated payoffs are one-dimensional")));
                }
                check_table(nodes, values, what)
            }
            PayoffFn::Mollified(m) => m.base.check(d, what),
            _ => Ok(()),
        }
    }
}

/// Marginal cost of control `f: [0, T] -> (0, inf)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CostFn {
    Constant { value: f64 },
    /// `initial - slope * t`, with `slope >= 0`.
    Linear { initial: f64, slope: f64 },
    /// `initial * exp(-rate * t)`, with `rate >= 0`.
    Exponential { initial: f64, rate: f64 },
    Mollified(Box<MollifiedCost>),
}

impl CostFn {
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            CostFn::Constant { value } => *value,
            CostFn::Linear { initial, slope } => initial - slope * t,
            CostFn::Exponential { initial, rate } => initial * (-rate * t).exp(),
            CostFn::Mollified(m) => m.eval(t),
        }
    }

    pub(crate) fn check(&self, horizon: f64) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("cost f: {msg}")));
        match self {
            CostFn::Constant { value } if *value <= 0.0 => bad("must be positive"),
            CostFn::Linear { initial, slope } if *slope < 0.0 || initial - slope * horizon <= 0.0 => {
                bad("linear cost must be non-increasing and positive on [0, T]")
            }
            CostFn::Exponential { initial, rate } if *initial <= 0.0 || *rate < 0.0 => {
                bad("exponential cost needs initial > 0 and rate >= 0")
            }
            _ => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn payoff_families() {
        let put = PayoffFn::Put { strike: 1.0, scale: 0.5 };
        assert_eq!(put.eval(0.0, &[0.0]), 0.5);
        assert_eq!(put.eval(0.0, &[2.0]), 0.0);
        let cap = PayoffFn::CappedAbs { scale: 1.0, cap: 3.0 };
        assert_eq!(cap.eval(0.0, &[-2.0]), 2.0);
        assert_eq!(cap.eval(0.0, &[5.0]), 3.0);
        let tab = PayoffFn::Tabulated { nodes: vec![0.0, 1.0], values: vec![0.0, 2.0] };
        assert_eq!(tab.eval(0.0, &[0.25]), 0.5);
        assert_eq!(tab.eval(0.0, &[9.0]), 2.0);
    }

    #[test]
    fn diffusion_sqrt_growth() {
        let s = DiffusionField::SqrtGrowthDiag { scale: vec![0.5] };
        let v = s.eval_vec(&[3.0], 1);
        assert!((v[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn json_roundtrip_tagged() {
        let g = PayoffFn::Put { strike: 1.0, scale: 1.0 };
        let s = serde_json::to_string(&g).unwrap();
        assert_eq!(s, r#"{"kind":"put","strike":1.0,"scale":1.0}"#);
        let back: PayoffFn = serde_json::from_str(&s).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn cost_checks() {
        assert!(CostFn::Constant { value: 0.0 }.check(1.0).is_err());
        assert!(CostFn::Linear { initial: 1.0, slope: 2.0 }.check(1.0).is_err());
        assert!(CostFn::Linear { initial: 1.0, slope: 0.5 }.check(1.0).is_ok());
    }
}
