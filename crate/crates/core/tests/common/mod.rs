#![allow(dead_code)]

use gamelab_core::{
    AssumptionProfile, CostFn, DiffusionField, Dims, DriftField, GameSpec, PayoffFn, Payoffs, ProfileVariant,
    SigmaStructure,
};

pub fn profile(k2: f64) -> AssumptionProfile {
    AssumptionProfile {
        variant: ProfileVariant::A22Sublinear,
        d1: 1.0,
        d2: Some(0.5),
        d3: 1.0,
        k1: 2.0,
        k2,
        k5: 2.0,
        sigma_structure: SigmaStructure::SeparableIa,
        beta: 0.5,
    }
}

pub fn game(drift: DriftField, diffusion: DiffusionField, f: f64, g: PayoffFn, r: f64) -> GameSpec {
    GameSpec {
        dims: Dims { state: 1, noise: 1 },
        horizon: 1.0,
        discount: r,
        drift,
        diffusion,
        payoffs: Payoffs { f: CostFn::Constant { value: f }, g, h: PayoffFn::Zero },
        profile: profile(10.0),
    }
}

pub fn put() -> PayoffFn {
    PayoffFn::Put { strike: 1.0, scale: 1.0 }
}

/// `b = 0`, `sigma = vol`, obstacle `(1 - x)^+`.
pub fn put_game(vol: f64, f: f64, r: f64) -> GameSpec {
    game(DriftField::Zero, DiffusionField::Constant { matrix: vec![vec![vol]] }, f, put(), r)
}

/// Optimal stopping of `x + vol W` on a recombining binomial lattice with
/// `steps` steps over the remaining time `tau`.
pub fn lattice_stopping(vol: f64, r: f64, tau: f64, x: f64, g: impl Fn(f64) -> f64, steps: usize) -> f64 {
    if tau <= 0.0 {
        return g(x);
    }
    let dt = tau / steps as f64;
    let dx = vol * dt.sqrt();
    let disc = (-r * dt).exp();
    let node = |k: usize, j: usize| x + (2.0 * j as f64 - k as f64) * dx;
    let mut v: Vec<f64> = (0..=steps).map(|j| g(node(steps, j))).collect();
    for k in (0..steps).rev() {
        for j in 0..=k {
            let cont = disc * 0.5 * (v[j] + v[j + 1]);
            v[j] = cont.max(g(node(k, j)));
        }
    }
    v[0]
}

/// Average of the `n` and `n + 1` step lattices, damping the odd-even
/// oscillation caused by the kink of the obstacle.
pub fn lattice_oracle(vol: f64, r: f64, tau: f64, x: f64, g: impl Fn(f64) -> f64 + Copy, n: usize) -> f64 {
    0.5 * (lattice_stopping(vol, r, tau, x, g, n) + lattice_stopping(vol, r, tau, x, g, n + 1))
}

pub fn put_payoff(x: f64) -> f64 {
    (1.0 - x).max(0.0)
}
