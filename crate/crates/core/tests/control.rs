use bsvie_core::control::toy::ScalarToy;
use bsvie_core::{
    check_equilibrium, make_grid, search_equilibrium, simulate_paths, variational_rates,
    ControlOptions, ControlPolicy, PathEnsemble, SearchOptions, Spike,
};

fn ensemble(n: usize, m: usize, seed: u64) -> PathEnsemble {
    simulate_paths(&make_grid(0.0, 1.0, n).unwrap(), m, 1, seed).unwrap()
}

#[test]
fn quadratic_toy_zero_control_is_an_equilibrium() {
    let toy = ScalarToy::quadratic();
    let e = ensemble(32, 2000, 11);
    let opts = ControlOptions::default();
    let zero = check_equilibrium(&toy, &ControlPolicy::constant(&e, 1), &e, &opts).unwrap();
    assert!(zero.violation_measure <= 0.02, "{}", zero.violation_measure);
    let one = check_equilibrium(&toy, &ControlPolicy::constant(&e, 2), &e, &opts).unwrap();
    assert!(one.violation_measure >= 0.9, "{}", one.violation_measure);
    let out = search_equilibrium(
        &toy,
        &ControlPolicy::constant(&e, 2),
        &e,
        &opts,
        &SearchOptions::default(),
    )
    .unwrap();
    assert!(out.converged && out.rounds <= 3, "{:?}", out.history);
    assert_eq!(out.policy, ControlPolicy::constant(&e, 1));
}

#[test]
fn spike_variation_rates() {
    let toy = ScalarToy::variational();
    let e = ensemble(256, 2000, 12);
    let dt = e.grid().dt();
    let eps: Vec<f64> = [8.0, 16.0, 32.0, 64.0].iter().map(|k| k * dt).collect();
    let pol = ControlPolicy::constant(&e, 0);
    let spike = Spike {
        tau_node: 128,
        control: 1,
    };
    let rep =
        variational_rates(&toy, &pol, spike, &eps, &e, &ControlOptions::default(), 256).unwrap();
    for r in &rep.rows {
        eprintln!("{r:?}");
    }
    eprintln!(
        "{:?} {:?} {:?} {:?}",
        rep.slope_x1, rep.slope_x2, rep.slope_remainder, rep.slope_residual
    );
    let s1 = rep.slope_x1.unwrap();
    let s2 = rep.slope_x2.unwrap();
    assert!((0.8..=1.2).contains(&s1), "x1 slope {s1}");
    assert!((1.7..=2.3).contains(&s2), "x2 slope {s2}");
    assert!(rep.slope_remainder.unwrap() >= 2.1);
    assert!(rep.slope_residual.unwrap() >= 1.1);
}
