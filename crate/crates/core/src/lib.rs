//! Numerics for zero-sum games between a singular controller and a stopper:
//! coupled SDE simulation, hitting-time stopping rules, a penalized grid
//! solver for the approximating value, payoff mollification and the
//! convergence studies built on them.

pub mod coeffs;
pub mod control;
pub mod error;
pub mod fit;
pub mod game;
pub mod grid;
pub mod lab;
pub mod mollify;
pub mod rng;
pub mod sde;
pub mod stopper;
pub mod vi;

pub use coeffs::{CostFn, DiffusionField, DriftField, PayoffFn};
pub use control::{check_control_class, make_control, realize_control, ControlFamily, ControlPath};
pub use error::{Error, Result};
pub use fit::{fit_loglog, LogFit};
pub use game::{
    evaluate_payoff, payoff_at_node, sample_box, stieltjes_cost, validate_assumptions, AssumptionProfile,
    AssumptionReport, Dims, GameSpec, Payoffs, ProfileVariant, SigmaStructure,
};
pub use grid::TimeGrid;
pub use lab::{
    analytic_rate_check, gamma_sweep, gamma_sweep_moments, mollify_sweep, optimality_gap_study,
    standard_control_family, stopping_liminf_check, value_rate_study, PathSetup, SweepReport, SweepRow, Verdict,
};
pub use mollify::{mollify_payoffs, MollifiedPayoffs};
pub use rng::BrownianDriver;
pub use sde::{
    left_limit, moment_estimate, simulate_controlled, simulate_coupled, simulate_coupled_with, sup_distance,
    CadlagPath, CoupledSample, Estimate, PathStatistic,
};
pub use stopper::{
    sigma_star, stop_record, stop_rule_payoff_gap, tau_star, theta_star, write_stop_records, GapReport, Obstacle, StopKind,
    StopRecord, StopRule, StopTime, ValueField,
};
pub use vi::{
    extract_contact_set, gradient_bound_check, solve_vi, vi_residual, GridField, GridSpec, PenaltySchedule, Region,
    ValueGrid,
};
