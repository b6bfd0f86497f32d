mod common;

use common::*;
use gamelab_core::mollify::MollifiedField;
use gamelab_core::*;
use proptest::prelude::*;

fn ou_game(vol: f64) -> GameSpec {
    game(
        DriftField::Affine { matrix: vec![vec![-1.0]], offset: vec![0.0] },
        DiffusionField::Constant { matrix: vec![vec![vol]] },
        1.0,
        put(),
        0.0,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn paths_are_reproducible_and_jump_only_at_atoms(
        seed in any::<u64>(),
        node in 0usize..100,
        size in 0.01f64..2.0,
        gamma in 0.0f64..0.9,
    ) {
        let spec = ou_game(0.3);
        let grid = TimeGrid::over(1.0, 100).unwrap();
        let family = ControlFamily::JumpAt { time: grid.time(node), size, direction: vec![-1.0] };
        let control = make_control(&family, grid).unwrap();
        let driver = BrownianDriver::generate(seed, 3, grid, 1, 1);
        let a = simulate_controlled(&spec, &control, &driver, gamma, &[0.2]).unwrap();
        let b = simulate_controlled(&spec, &control, &BrownianDriver::generate(seed, 3, grid, 1, 1), gamma, &[0.2]).unwrap();
        prop_assert_eq!(&a, &b);
        for k in 0..grid.n_nodes() {
            let jump = a.value(k)[0] - a.pre_value(k)[0];
            if k == node {
                prop_assert!(a.jump_flags[k]);
                prop_assert!((jump + size).abs() < 1e-12);
            } else {
                prop_assert!(!a.jump_flags[k]);
                prop_assert_eq!(jump, 0.0);
            }
        }
    }

    #[test]
    fn linear_coupling_distance_is_proportional_to_gamma(
        seed in any::<u64>(),
        g1 in 0.01f64..0.4,
        factor in 1.1f64..2.0,
    ) {
        // With affine drift and constant sigma the perturbation is gamma times
        // a path that does not depend on gamma.
        let spec = ou_game(0.5);
        let control = ControlPath::zero(TimeGrid::over(1.0, 200).unwrap(), 1);
        let g2 = g1 * factor;
        let sample = simulate_coupled(&spec, &control, seed, &[g1, g2], &[0.4]).unwrap();
        let d1 = sup_distance(sample.at(g1).unwrap(), &sample.base, 1.0).unwrap();
        let d2 = sup_distance(sample.at(g2).unwrap(), &sample.base, 1.0).unwrap();
        prop_assert!((d2 / d1 - factor).abs() < 1e-9 * factor, "{} {}", d2 / d1, factor);
    }

    #[test]
    fn theta_is_the_earlier_rule_and_tolerance_only_brings_it_forward(
        seed in any::<u64>(),
        node in 0usize..50,
        size in 0.0f64..1.5,
        tol_lo in 1e-6f64..1e-3,
        widen in 1.0f64..100.0,
        kink in 0.2f64..0.9,
    ) {
        let spec = ou_game(0.4);
        let grid = TimeGrid::over(1.0, 50).unwrap();
        let control = make_control(&ControlFamily::JumpAt { time: grid.time(node), size, direction: vec![1.0] }, grid).unwrap();
        let driver = BrownianDriver::generate(seed, 0, grid, 1, 1);
        let path = simulate_controlled(&spec, &control, &driver, 0.0, &[0.3]).unwrap();
        let value = move |t: f64, x: &[f64]| spec_g(t, x) + 0.5 * (x[0] - kink).max(0.0).powi(2);
        let g = |t: f64, x: &[f64]| spec_g(t, x);
        let tol_hi = tol_lo * widen;
        let tau = tau_star(&value, &g, &path, 0.0, tol_lo).unwrap();
        let sigma = sigma_star(&value, &g, &path, 0.0, tol_lo).unwrap();
        let theta = theta_star(&value, &g, &path, 0.0, tol_lo).unwrap();
        prop_assert_eq!(theta.node, tau.node.min(sigma.node));
        prop_assert!(sigma.node <= tau.node);
        let theta_hi = theta_star(&value, &g, &path, 0.0, tol_hi).unwrap();
        prop_assert!(theta_hi.node <= theta.node);
        prop_assert!(tau_star(&value, &g, &path, 0.0, tol_hi).unwrap().node <= tau.node);
    }

    #[test]
    fn truncation_is_monotone_in_the_cap(x in -4.5f64..4.5, j in 2u32..12, m in 0.5f64..3.0) {
        let base = PayoffFn::CappedAbs { scale: 1.0, cap: 3.0 };
        let lo = MollifiedField::new(base.clone(), j, 6, m, 1.0);
        let hi = MollifiedField::new(base, j, 6, m + 1.0, 1.0);
        prop_assert!(hi.eval(0.0, &[x]) >= lo.eval(0.0, &[x]) - 1e-12);
    }

    #[test]
    fn mollified_constant_is_constant(c in 0.0f64..5.0, j in 1u32..20, x in -3.0f64..3.0) {
        let field = MollifiedField::new(PayoffFn::Constant { value: c }, j, 5, 10.0, 1.0);
        prop_assert!((field.eval(0.0, &[x]) - c).abs() < 1e-10);
    }
}

fn spec_g(_t: f64, x: &[f64]) -> f64 {
    put_payoff(x[0])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn even_games_have_even_values(vol in 0.05f64..0.8, gamma in 0.01f64..0.5, f in 0.3f64..3.0) {
        let spec = game(
            DriftField::Zero,
            DiffusionField::Constant { matrix: vec![vec![vol]] },
            f,
            PayoffFn::Abs { scale: 0.25, center: None },
            0.1,
        );
        let ug = solve_vi(&spec, gamma, &GridSpec::new(30, 60, 3.0), &PenaltySchedule::default()).unwrap();
        let nx = ug.n_x();
        for n in 0..ug.n_t() {
            for i in 0..nx / 2 {
                let (a, b) = (ug.u_at(n, i), ug.u_at(n, nx - 1 - i));
                prop_assert!((a - b).abs() <= 1e-8 * (1.0 + a.abs()), "{n} {i} {a} {b}");
            }
        }
    }
}

fn solved(spec: &GameSpec, gamma: f64) -> ValueGrid {
    solve_vi(spec, gamma, &GridSpec::new(200, 400, 2.5), &PenaltySchedule::default()).unwrap()
}

fn games() -> Vec<(&'static str, GameSpec)> {
    let mut gradient = put_game(0.4, 0.5, 0.0);
    gradient.payoffs.g = PayoffFn::Put { strike: 1.0, scale: 0.5 };
    vec![
        ("pure stopping", put_game(0.4, 1e6, 0.0)),
        ("early exercise", put_game(0.4, 1.0, 0.5)),
        ("active gradient", gradient),
    ]
}

#[test]
fn penalty_stages_do_not_increase_the_residual() {
    for (name, spec) in games() {
        let ug = solved(&spec, 0.0625);
        for w in ug.stages.windows(2) {
            let (a, b) = (w[0].residual.max, w[1].residual.max);
            assert!(b <= 1.05 * a + 1e-12, "{name}: stage residual {a:e} -> {b:e}");
        }
    }
}

#[test]
fn obstacle_dominance_terminal_slice_and_linear_growth() {
    for (name, spec) in games() {
        let ug = solved(&spec, 0.125);
        let (nt, nx) = (ug.n_t(), ug.n_x());
        let mut c: f64 = 0.0;
        // The last obstacle penalty leaves u short of g by about eps * r * g.
        let tol = 1e-4;
        for n in 0..nt {
            for i in 0..nx {
                let k = ug.idx(n, i);
                let x = ug.x_nodes[i];
                let g = spec.g(ug.t_nodes[n], &[x]);
                assert!(ug.u[k] >= g - tol, "{name}: u < g at ({n}, {i})");
                assert!(ug.u[k] >= 0.0);
                c = c.max(ug.u[k] / (1.0 + x.abs()));
                if n == nt - 1 {
                    assert_eq!(ug.u[k].to_bits(), g.to_bits(), "{name}: terminal slice");
                }
            }
        }
        // (1 - x)^+ / (1 + |x|) peaks at 1 on x = 0; the premium adds little.
        assert!(c.is_finite() && c <= 1.1, "{name}: growth constant {c}");
    }
}

#[test]
fn stop_rules_coincide_without_atoms() {
    let spec = put_game(0.4, 1.0, 0.5);
    let ug = solve_vi(&spec, 0.0625, &GridSpec::new(100, 200, 2.5), &PenaltySchedule::default()).unwrap();
    let field = GridField::new(&ug);
    let g = Obstacle(&spec);
    let grid = TimeGrid::over(1.0, 100).unwrap();
    for family in [ControlFamily::Zero, ControlFamily::ReflectAt { barrier: 0.8, direction: vec![1.0] }] {
        let (mut paths, mut controls) = (Vec::new(), Vec::new());
        for i in 0..300 {
            let d = BrownianDriver::generate(17, i, grid, 1, 1);
            let c = realize_control(&family, &spec, &d, 0.0, &[0.9]).unwrap();
            paths.push(simulate_controlled(&spec, &c, &d, 0.0, &[0.9]).unwrap());
            controls.push(c);
        }
        let rep = stop_rule_payoff_gap(&spec, &field, &g, &paths, &controls, 0.0, 1e-4).unwrap();
        assert_eq!(rep.n_strict, 0, "{family:?}");
        assert!(rep.records.iter().all(|r| r.tau == r.sigma && r.sigma == r.theta));
        assert_eq!(rep.gap.mean, 0.0);
    }
}

#[test]
fn zero_control_attains_lattice_value_on_pure_stopping() {
    let gamma = 0.0625;
    let spec = put_game(0.4, 1e6, 0.0);
    let ug = solved(&spec, gamma);
    let field = GridField::new(&ug);
    let x0 = 0.9;
    let oracle = lattice_oracle((0.16f64 + gamma * gamma).sqrt(), 0.0, 1.0, x0, put_payoff, 2000);
    let setup = lab::PathSetup { grid: TimeGrid::over(1.0, 200).unwrap(), x0: vec![x0], t: 0.0, seed: 5, n_paths: 10_000 };
    let family = standard_control_family(1);
    let report = optimality_gap_study(&spec, &field, oracle, &family, &setup, 1e-6, 0.01 * oracle).unwrap();
    assert!(report.pass, "margin {} allowance {}", report.margin, report.allowance);
    let zero = &report.outcomes[0];
    assert!(matches!(zero.control, ControlFamily::Zero));
    assert!((zero.payoff.mean - oracle).abs() <= 0.01 * oracle + 2.0 * zero.payoff.stderr, "{:?} vs {oracle}", zero.payoff);
    for o in &report.outcomes[1..] {
        if o.mean_total > 0.1 {
            assert!(o.payoff.mean > zero.payoff.mean, "{:?}", o.control);
        }
    }
}
