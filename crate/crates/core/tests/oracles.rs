use bsvie_core::oracles::{
    discretisation_residual, o1_zero, o2_martingale, o3_volterra, o4_exponential,
    o5_counterexample, DiagonalCounterexample, OracleKind,
};
use bsvie_core::rates::loglog_slope;
use bsvie_core::{make_grid, oracle_suite, simulate_paths, OracleId, PathEnsemble};

fn ensemble(n: usize, m: usize, seed: u64) -> PathEnsemble {
    simulate_paths(&make_grid(0.0, 1.0, n).unwrap(), m, 1, seed).unwrap()
}

#[test]
fn suite_lists_six_oracles_in_order() {
    let ids: Vec<OracleId> = oracle_suite().iter().map(|o| o.id).collect();
    use OracleId::*;
    assert_eq!(ids, vec![O1, O2, O3, O4, O5, O6]);
    for id in ["o1", "O6"] {
        assert!(id.parse::<OracleId>().is_ok());
    }
    assert!("O7".parse::<OracleId>().is_err());
}

#[test]
fn counterexample_averages_match_formula() {
    let o = DiagonalCounterexample::new(2.0, 0.0, 1.0).unwrap();
    for (eps, want) in [(0.04, 10.0), (0.02, 10.0 * 2f64.sqrt()), (0.01, 20.0)] {
        assert!((o.epsilon_average(eps) - want).abs() <= 1e-9, "{eps}");
    }
    // independent check: substitute u = (s - t)^{1/2} and integrate 2 du exactly
    let eps: f64 = 0.01;
    assert!((o.integral(eps) - 2.0 * eps.sqrt()).abs() <= 1e-15);
    assert!(DiagonalCounterexample::new(1.0, 0.0, 1.0).is_err());
    assert!(o5_counterexample(0.5).is_err());
}

#[test]
fn counterexample_field_is_singular_above_diagonal_only() {
    let o = DiagonalCounterexample::new(3.0, 0.0, 1.0).unwrap();
    assert_eq!(o.z1(0.5, 0.5), 0.0);
    assert_eq!(o.z1(0.5, 0.2), 0.0);
    assert!((o.z1(0.0, 0.125) - 2.0).abs() < 1e-12);
}

#[test]
fn closed_forms_are_exact_where_expected() {
    let e = ensemble(16, 50, 1);
    for o in [o1_zero(), o2_martingale()] {
        let r = discretisation_residual(&o, &e).unwrap();
        assert!(r <= 1e-12, "{}: {r}", o.name);
    }
}

#[test]
fn closed_form_residual_vanishes_under_refinement() {
    for o in [o3_volterra(0.5, 1.0), o4_exponential(0.5, 1.0)] {
        let ns = [8, 16, 32, 64];
        let res: Vec<f64> = ns
            .iter()
            .map(|&n| discretisation_residual(&o, &ensemble(n, 4, 2)).unwrap())
            .collect();
        let xs: Vec<f64> = ns.iter().map(|&n| 1.0 / n as f64).collect();
        let slope = loglog_slope(&xs, &res).unwrap();
        assert!(slope >= 1.0, "{}: slope {slope}, residuals {res:?}", o.name);
    }
}

#[test]
fn volterra_closed_form_at_origin() {
    let o = o3_volterra(0.5, 1.0);
    let OracleKind::Ebsvie(_) = &o.kind else {
        panic!("expected an equation oracle");
    };
    let e = ensemble(4, 1, 3);
    let eta = o.closed_form.eta.as_ref().unwrap();
    let cell = bsvie_core::Cell {
        t_idx: 0,
        t: 0.0,
        s_idx: 0,
        s: 0.0,
        path: 0,
        role: bsvie_core::PathRole::Primary,
    };
    // backward Euler with 10⁴ steps gives e^{0.5} to about 1e-4
    let mut y = 1.0;
    for _ in 0..10_000 {
        y /= 1.0 - 0.5 / 10_000.0;
    }
    assert!((eta(&cell, e.primary()) - y).abs() <= 1e-4);
    assert!((eta(&cell, e.primary()) - 0.5f64.exp()).abs() <= 1e-12);
}

#[test]
fn analytic_and_control_oracles_have_no_residual() {
    let e = ensemble(4, 2, 4);
    for o in oracle_suite() {
        let has = discretisation_residual(&o, &e).is_some();
        assert_eq!(has, matches!(o.kind, OracleKind::Ebsvie(_)), "{}", o.name);
    }
}

#[test]
fn every_oracle_passes_its_tolerance_profile() {
    for o in oracle_suite() {
        let out = bsvie_core::oracles::verify_oracle(&o, 2024).unwrap();
        eprintln!("{:?} {:?}", out.id, out.errors);
        assert!(out.passed, "{out:?}");
    }
}
