//! Numerical toolkit for extended backward stochastic Volterra integral
//! equations (EBSVIEs) and time-inconsistent recursive control.
//!
//! The crate is organised bottom-up:
//!
//! * [`grid`]: uniform time grids and reproducible Brownian ensembles.
//! * [`fields`]: one- and two-time-parameter random fields, their norms and
//!   the adaptedness (scramble) check.
//! * [`bsde`]: regression Monte Carlo solver for BSDEs.
//! * [`ebsvie`]: Picard solver for EBSVIEs, Type-I BSVIEs, the derivative
//!   equation in `t`, the `Diag` operator and Property (D) diagnostics.
//! * [`control`]: state SDE, recursive cost, adjoint equations, the
//!   H-function and the open-loop equilibrium check/search.
//! * [`oracles`]: closed-form reference problems.

#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::too_many_arguments,
    clippy::needless_range_loop
)]

pub mod bsde;
pub mod control;
pub mod ebsvie;
pub mod error;
pub mod fields;
pub mod grid;
pub mod io;
pub mod oracles;
pub mod rates;

pub use bsde::{
    solve_bsde, BasisKind, BsdeSolution, BsdeSpec, Cell, RegressionBasis, SchemeParams,
};
pub use control::{
    build_bundle, check_derivatives, check_equilibrium, eval_h_function, search_equilibrium,
    solve_adjoints, solve_cost_bsvie, solve_state_sde, variational_rates, ControlOptions,
    ControlPolicy, ControlProblem, EquilibriumBundle, EquilibriumCheck, SearchOptions,
    SearchOutcome, Spike, VariationalReport,
};
pub use ebsvie::{
    compute_diag, property_d_rate, solve_derivative_ebsvie, solve_ebsvie, solve_type1_bsvie,
    EbsvieSolution, EbsvieSpec, SolveOptions, SolveReport,
};
pub use error::{Error, Result};
pub use fields::{AdaptedField, BetaNorm, BiTemporalField, Paired};
pub use grid::{make_grid, simulate_paths, PathEnsemble, PathRole, PathSet, TimeGrid};
pub use oracles::{oracle_suite, OracleId, OracleProblem};
