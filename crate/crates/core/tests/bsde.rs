use bsvie_core::bsde::{bsde_stability_probe, FnBsde};
use bsvie_core::fields::{scramble_test, AnyField};
use bsvie_core::{
    make_grid, simulate_paths, solve_bsde, AdaptedField, PathEnsemble, RegressionBasis,
};

fn terminal_w(scale: f64) -> FnBsde {
    FnBsde::new(
        1,
        1,
        move |c, paths, out| out[0] = scale * paths.brownian(c.path, c.s_idx, 0),
        |_, _, _, _, out| out[0] = 0.0,
    )
}

fn ensemble(n: usize, m: usize, seed: u64) -> PathEnsemble {
    simulate_paths(&make_grid(0.0, 1.0, n).unwrap(), m, 1, seed).unwrap()
}

/// Largest over nodes of the path-RMS deviation from `want(path, node)`.
fn max_rms(f: &AdaptedField, k: usize, want: impl Fn(usize, usize) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    for j in 0..f.n_nodes() {
        let ms = (0..f.n_paths())
            .map(|p| (f.get(p, j, k) - want(p, j)).powi(2))
            .sum::<f64>()
            / f.n_paths() as f64;
        worst = worst.max(ms.sqrt());
    }
    worst
}

#[test]
fn zero_problem_is_exactly_zero() {
    let e = ensemble(16, 200, 1);
    let spec = FnBsde::new(2, 1, |_, _, o| o.fill(0.0), |_, _, _, _, o| o.fill(0.0));
    let sol = solve_bsde(&spec, &e, &RegressionBasis::default()).unwrap();
    assert!(sol.y.primary.values().iter().all(|v| *v == 0.0));
    assert!(sol.z.primary.values().iter().all(|v| *v == 0.0));
}

#[test]
fn brownian_terminal_recovers_unit_integrand() {
    let e = ensemble(32, 10_000, 2);
    let sol = solve_bsde(&terminal_w(1.0), &e, &RegressionBasis::brownian(1)).unwrap();
    let w = AdaptedField::brownian(&e, bsvie_core::PathRole::Primary);
    let ez = max_rms(&sol.z.primary, 0, |_, _| 1.0);
    let ey = max_rms(&sol.y.primary, 0, |p, j| w.get(p, j, 0));
    assert!(ez <= 0.05, "z error {ez}");
    assert!(ey <= 0.05, "y error {ey}");
}

#[test]
fn linear_generator_matches_exponential() {
    let a = 0.5;
    let e = ensemble(64, 64, 3);
    let spec = FnBsde::new(
        1,
        1,
        |_, _, o| o[0] = 1.0,
        move |_, y, _, _, o| o[0] = a * y[0],
    );
    let sol = solve_bsde(&spec, &e, &RegressionBasis::constant()).unwrap();
    let y0 = sol.y.primary.get(0, 0, 0);
    assert!((y0 - a.exp()).abs() <= 2e-2, "y0 {y0}");
    let g = e.grid();
    let err = max_rms(&sol.y.primary, 0, |_, j| (a * (1.0 - g.node(j))).exp());
    assert!(err < 1e-4, "trapezoidal scheme error {err}");
}

#[test]
fn zero_generator_solve_is_linear_in_terminal() {
    let e = ensemble(16, 500, 4);
    let basis = RegressionBasis::brownian(2);
    let psi1 = |c: &bsvie_core::Cell, paths: &bsvie_core::PathSet| {
        paths.brownian(c.path, c.s_idx, 0).powi(2)
    };
    let psi2 = |c: &bsvie_core::Cell, paths: &bsvie_core::PathSet| {
        (paths.brownian(c.path, c.s_idx, 0)).sin()
    };
    let zero =
        |_: &bsvie_core::Cell, _: &[f64], _: &[f64], _: &bsvie_core::PathSet, o: &mut [f64]| {
            o[0] = 0.0
        };
    let s1 = solve_bsde(
        &FnBsde::new(1, 1, move |c, p, o| o[0] = psi1(c, p), zero),
        &e,
        &basis,
    )
    .unwrap();
    let s2 = solve_bsde(
        &FnBsde::new(1, 1, move |c, p, o| o[0] = psi2(c, p), zero),
        &e,
        &basis,
    )
    .unwrap();
    let (a, b) = (2.5, -0.75);
    let sc = solve_bsde(
        &FnBsde::new(
            1,
            1,
            move |c, p, o| o[0] = a * psi1(c, p) + b * psi2(c, p),
            zero,
        ),
        &e,
        &basis,
    )
    .unwrap();
    for (i, v) in sc.y.primary.values().iter().enumerate() {
        let want = a * s1.y.primary.values()[i] + b * s2.y.primary.values()[i];
        assert!((v - want).abs() <= 1e-12 * (1.0 + want.abs()));
    }
    for (i, v) in sc.z.primary.values().iter().enumerate() {
        let want = a * s1.z.primary.values()[i] + b * s2.z.primary.values()[i];
        assert!((v - want).abs() <= 1e-10 * (1.0 + want.abs()));
    }
}

#[test]
fn error_shrinks_under_joint_refinement() {
    // ψ = W(T), g = a·y has y = e^{a(T-s)} W(s), z = e^{a(T-s)}
    let a = 0.5;
    let mut errs = Vec::new();
    for (n, m) in [(8, 1_000), (16, 4_000), (32, 16_000)] {
        let e = ensemble(n, m, 5);
        let spec = FnBsde::new(
            1,
            1,
            |c, p, o| o[0] = p.brownian(c.path, c.s_idx, 0),
            move |_, y, _, _, o| o[0] = a * y[0],
        );
        let sol = solve_bsde(&spec, &e, &RegressionBasis::brownian(1)).unwrap();
        let g = e.grid().clone();
        let w = AdaptedField::brownian(&e, bsvie_core::PathRole::Primary);
        errs.push(
            max_rms(&sol.z.primary, 0, |_, j| (a * (1.0 - g.node(j))).exp())
                + max_rms(&sol.y.primary, 0, |p, j| {
                    (a * (1.0 - g.node(j))).exp() * w.get(p, j, 0)
                }),
        );
    }
    assert!(errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");
}

#[test]
fn stability_probe_examples() {
    let e = ensemble(16, 2_000, 6);
    let basis = RegressionBasis::brownian(1);
    let same = bsde_stability_probe(&terminal_w(1.0), &terminal_w(1.0), &e, &basis).unwrap();
    assert_eq!(same.numerator, 0.0);

    let delta = 0.1;
    let zero =
        |_: &bsvie_core::Cell, _: &[f64], _: &[f64], _: &bsvie_core::PathSet, o: &mut [f64]| {
            o[0] = 0.0
        };
    let s1 = FnBsde::new(1, 1, |c, p, o| o[0] = p.brownian(c.path, c.s_idx, 0), zero);
    let s2 = FnBsde::new(
        1,
        1,
        move |c, p, o| o[0] = p.brownian(c.path, c.s_idx, 0) + delta,
        zero,
    );
    let shift = bsde_stability_probe(&s1, &s2, &e, &basis).unwrap();
    assert!((shift.numerator - delta).abs() < 1e-12);
    assert!((shift.ratio - 1.0).abs() < 1e-10);

    let a = solve_bsde(&s1, &e, &basis).unwrap();
    let b = solve_bsde(&terminal_w(1.01), &e, &basis).unwrap();
    let n = e.grid().n_steps();
    let dz = (0..n)
        .map(|j| (b.z.primary.mean_at(j, 0) - a.z.primary.mean_at(j, 0) - 0.01).abs())
        .fold(0.0, f64::max);
    assert!(dz < 1e-3, "z difference off by {dz}");
    assert!((b.y.primary.mean_at(0, 0) - a.y.primary.mean_at(0, 0)).abs() < 1e-3);
}

#[test]
fn bsde_outputs_are_adapted() {
    let e = ensemble(16, 300, 7);
    let basis = RegressionBasis::brownian(2);
    for spec in [
        FnBsde::new(1, 1, |_, _, o| o[0] = 0.0, |_, _, _, _, o| o[0] = 0.0),
        FnBsde::new(
            1,
            1,
            |c, p, o| o[0] = p.brownian(c.path, c.s_idx, 0).cos(),
            |_, y, z, _, o| o[0] = 0.3 * y[0] - z[0].sin(),
        ),
    ] {
        for j in [0, 5, 8, 15] {
            let producer = |e: &PathEnsemble| {
                let s = solve_bsde(&spec, e, &basis)?;
                Ok(vec![
                    AnyField::from(s.y.primary),
                    AnyField::from(s.z.primary),
                ])
            };
            assert!(scramble_test(producer, &e, j).unwrap(), "node {j}");
        }
    }
}
