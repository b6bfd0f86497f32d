//! Fixture games shared by the benchmarks.

use gamelab_core::{
    AssumptionProfile, CostFn, DiffusionField, Dims, DriftField, GameSpec, PayoffFn, Payoffs, ProfileVariant,
    SigmaStructure,
};

/// One-dimensional game with `b(x) = -x` and `sigma(x) = 0.5 (1 + |x|)^{1/2}`.
pub fn coupling_game() -> GameSpec {
    GameSpec {
        dims: Dims { state: 1, noise: 1 },
        horizon: 1.0,
        discount: 0.0,
        drift: DriftField::Affine { matrix: vec![vec![-1.0]], offset: vec![0.0] },
        diffusion: DiffusionField::SqrtGrowthDiag { scale: vec![0.5] },
        payoffs: Payoffs { f: CostFn::Constant { value: 1.0 }, g: PayoffFn::Zero, h: PayoffFn::Zero },
        profile: profile(),
    }
}

/// Put obstacle under constant volatility `0.4`, with cost `f`.
pub fn put_game(f: f64) -> GameSpec {
    GameSpec {
        dims: Dims { state: 1, noise: 1 },
        horizon: 1.0,
        discount: 0.0,
        drift: DriftField::Zero,
        diffusion: DiffusionField::Constant { matrix: vec![vec![0.4]] },
        payoffs: Payoffs {
            f: CostFn::Constant { value: f },
            g: PayoffFn::Put { strike: 1.0, scale: 1.0 },
            h: PayoffFn::Zero,
        },
        profile: profile(),
    }
}

fn profile() -> AssumptionProfile {
    AssumptionProfile {
        variant: ProfileVariant::A22Sublinear,
        d1: 1.0,
        d2: Some(0.5),
        d3: 1.0,
        k1: 2.0,
        k2: 2.0,
        k5: 2.0,
        sigma_structure: SigmaStructure::SqrtGrowthIb,
        beta: 0.5,
    }
}
