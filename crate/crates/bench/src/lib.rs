//! Fixtures shared by the benchmarks.

use std::sync::Arc;

use bsvie_core::ebsvie::FnEbsvie;
use bsvie_core::oracles::{OracleKind, OracleProblem};
use bsvie_core::{make_grid, simulate_paths, PathEnsemble};

/// Brownian ensemble on `[0, 1]` with `n` steps and `m` scalar paths.
pub fn ensemble(n: usize, m: usize, seed: u64) -> PathEnsemble {
    simulate_paths(&make_grid(0.0, 1.0, n).expect("grid"), m, 1, seed).expect("ensemble")
}

/// The equation behind an oracle.
pub fn equation(o: &OracleProblem) -> Arc<FnEbsvie> {
    match &o.kind {
        OracleKind::Ebsvie(s) => s.clone(),
        _ => panic!("{} is not an equation oracle", o.name),
    }
}
