use bsvie_core::control::toy::ScalarToy;
use bsvie_core::control::Restricted;
use bsvie_core::{
    build_bundle, check_equilibrium, eval_h_function, make_grid, search_equilibrium,
    simulate_paths, ControlOptions, ControlPolicy, ControlProblem, EquilibriumBundle, PathEnsemble,
    PathRole, SearchOptions,
};

fn ensemble(n: usize, m: usize, seed: u64) -> PathEnsemble {
    simulate_paths(&make_grid(0.0, 1.0, n).unwrap(), m, 1, seed).unwrap()
}

fn bundle(toy: &ScalarToy, pol: &ControlPolicy, e: &PathEnsemble) -> EquilibriumBundle {
    build_bundle(toy, pol, e, &ControlOptions::default()).unwrap()
}

#[test]
fn linear_state_adjoint_is_exponential() {
    let a = 0.5;
    let toy = ScalarToy::linear_state(a);
    let e = ensemble(64, 16, 1);
    let b = bundle(&toy, &ControlPolicy::constant(&e, 0), &e);
    let g = e.grid();
    let p = &b.adjoints.p.primary;
    let mut worst: f64 = 0.0;
    for t in 0..=64 {
        for s in t..=64 {
            for path in 0..e.n_paths() {
                worst = worst.max((p.get(t, path, s, 0) - (a * (1.0 - g.node(s))).exp()).abs());
            }
        }
        // terminal identities hold exactly
        for path in 0..e.n_paths() {
            assert_eq!(p.get(t, path, 64, 0), 1.0);
            assert_eq!(b.adjoints.big_p.primary.get(t, path, 64, 0), 0.0);
        }
    }
    assert!(worst <= 0.02, "adjoint error {worst}");
}

#[test]
fn discounted_adjoint_diagonal_matches_closed_form() {
    let toy = ScalarToy::discounted(1.0, 0.5, 2.0);
    let e = ensemble(32, 500, 2);
    let b = bundle(&toy, &ControlPolicy::constant(&e, 1), &e);
    let g = e.grid();
    let pd = &b.adjoints.p_diag.primary;
    for j in 0..32 {
        let want = toy.discounted_p_diag(g.node(j));
        for path in 0..e.n_paths() {
            assert!((pd.get(path, j, 0) - want).abs() <= 0.05, "node {j}");
        }
    }
    let p = &b.adjoints.p.primary;
    for t in 0..=32 {
        let want = 2.0 * (-(1.0 - g.node(t))).exp();
        assert_eq!(p.get(t, 0, 32, 0), want);
    }
}

#[test]
fn quadratic_toy_h_is_control_squared() {
    let toy = ScalarToy::quadratic();
    let e = ensemble(16, 200, 3);
    let b = bundle(&toy, &ControlPolicy::constant(&e, 1), &e);
    for j in 0..16 {
        for path in (0..200).step_by(17) {
            assert!(b.h(j, path, 1).abs() <= 1e-9);
            assert!((b.h(j, path, 0) - 1.0).abs() <= 1e-9);
            assert!((b.h(j, path, 2) - 1.0).abs() <= 1e-9);
        }
    }
    assert!(eval_h_function(&toy, &b, 0, 0, 3).is_err());
    assert!(eval_h_function(&toy, &b, 16, 0, 0).is_err());
}

#[test]
fn h_at_the_incumbent_drops_the_second_order_terms() {
    let toy = ScalarToy::variational();
    let e = ensemble(16, 300, 4);
    let pol = ControlPolicy::from_fn(&e, |_, p, j| (p + j) % 2);
    let b = bundle(&toy, &pol, &e);
    let g = e.grid();
    let mut cells = 0;
    for j in 0..16 {
        for path in (0..300).step_by(47) {
            let v = pol.index(PathRole::Primary, path, j);
            let (s, u) = (g.node(j), toy.controls[v]);
            let x = b.x_hat.primary.at(path, j);
            let (mut bx, mut sx) = ([0.0], [0.0]);
            toy.drift(s, u, x, &mut bx);
            toy.diffusion(s, u, x, &mut sx);
            let want = b.adjoints.p_diag.primary.get(path, j, 0) * bx[0]
                + b.adjoints.diag_q.primary.get(path, j, 0) * sx[0]
                + toy.running_cost(
                    s,
                    s,
                    u,
                    x,
                    b.cost.y_hat.primary.get(path, j, 0),
                    b.cost.diag_z.primary.get(path, j, 0),
                )
                + 0.5 * 0.0;
            assert_eq!(eval_h_function(&toy, &b, j, path, v).unwrap(), want);
            cells += 1;
        }
    }
    assert!(cells >= 100);
}

#[test]
fn scaling_the_cost_scales_h_gaps() {
    let toy = ScalarToy::discounted(1.0, 0.5, 2.0);
    let e = ensemble(16, 200, 5);
    let pol = ControlPolicy::constant(&e, 1);
    let b1 = bundle(&toy, &pol, &e);
    let b2 = bundle(&toy.scaled_cost(2.0), &pol, &e);
    for j in 0..16 {
        for path in 0..200 {
            for v in [0, 2] {
                let d1 = b1.h(j, path, v) - b1.h(j, path, 1);
                let d2 = b2.h(j, path, v) - b2.h(j, path, 1);
                assert!((d2 - 2.0 * d1).abs() <= 1e-12 * (1.0 + d2.abs()));
            }
        }
    }

    let toy = ScalarToy::variational();
    let b1 = bundle(&toy, &ControlPolicy::constant(&e, 0), &e);
    let b10 = bundle(&toy.scaled_cost(10.0), &ControlPolicy::constant(&e, 0), &e);
    let argmin = |b: &EquilibriumBundle, j, p| {
        if b.h(j, p, 1) < b.h(j, p, 0) {
            1
        } else {
            0
        }
    };
    for j in 0..16 {
        for path in 0..200 {
            if (b1.h(j, path, 1) - b1.h(j, path, 0)).abs() > 1e-9 {
                assert_eq!(argmin(&b1, j, path), argmin(&b10, j, path));
            }
        }
    }
}

#[test]
fn undiscounted_fields_are_t_independent() {
    let toy = ScalarToy::discounted(0.0, 0.5, 2.0);
    let e = ensemble(16, 300, 6);
    let pol = ControlPolicy::constant(&e, 1);
    let b = bundle(&toy, &pol, &e);
    for f in [
        &b.adjoints.p.primary,
        &b.adjoints.q.primary,
        &b.cost.z_hat.primary,
    ] {
        assert!(f.max_adjacent_t_distance() <= 1e-10);
    }
    // the classical condition: minimise p·b + q·σ + f at each cell
    let chk = check_equilibrium(&toy, &pol, &e, &ControlOptions::default()).unwrap();
    let mut bad = 0;
    for j in 0..16 {
        for path in 0..300 {
            let h = |v: usize| {
                let u = toy.controls[v];
                b.adjoints.p.primary.get(0, path, j, 0) * u + u * u
            };
            if h(1) - h(0).min(h(2)) > chk.tol_h {
                bad += 1;
            }
        }
    }
    let want = e.grid().dt() * bad as f64 / 300.0;
    assert!((chk.violation_measure - want).abs() <= 1e-12);
}

#[test]
fn search_result_passes_its_own_check() {
    let toy = ScalarToy::quadratic();
    let e = ensemble(16, 300, 7);
    let opts = ControlOptions::default();
    let out = search_equilibrium(
        &toy,
        &ControlPolicy::from_fn(&e, |_, p, j| (p * 7 + j) % 3),
        &e,
        &opts,
        &SearchOptions::default(),
    )
    .unwrap();
    assert!(out.converged);
    let chk = check_equilibrium(&toy, &out.policy, &e, &opts).unwrap();
    assert!(chk.worst_cells.is_empty(), "{:?}", chk.worst_cells);
}

#[test]
fn restriction_does_not_increase_the_violation() {
    let toy = ScalarToy::quadratic();
    let e = ensemble(16, 300, 8);
    let opts = ControlOptions::default();
    let pol = ControlPolicy::from_fn(&e, |_, p, j| usize::from(j >= 12 && p % 4 == 0));
    let full = check_equilibrium(&toy, &pol, &e, &opts).unwrap();
    let rens = e.restrict(8).unwrap();
    let rp = Restricted::at_node(&toy, &full.bundle.x_hat, 8, e.n_paths());
    let sub = check_equilibrium(&rp, &pol.restrict(8, e.n_paths()).unwrap(), &rens, &opts).unwrap();
    assert!(full.violation_measure > 0.0);
    assert!(sub.violation_measure <= full.violation_measure + 1e-12);
}
