use bsvie_core::bsde::FnBsde;
use bsvie_core::ebsvie::FnEbsvie;
use bsvie_core::fields::{beta_norm, empirical_sup_norm, BetaNorm};
use bsvie_core::rates::loglog_slope;
use bsvie_core::{
    make_grid, simulate_paths, solve_bsde, solve_ebsvie, BiTemporalField, RegressionBasis,
    SolveOptions, TimeGrid,
};
use proptest::prelude::*;

fn field(g: &TimeGrid, m: usize, seed: u64) -> BiTemporalField {
    BiTemporalField::from_fn(g, m, 1, |t, p, s, o| {
        let h = (seed ^ ((t * 131 + p * 17 + s) as u64)).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        o[0] = (h >> 11) as f64 / (1u64 << 53) as f64 - 0.5;
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ensembles_are_reproducible_and_prefix_stable(
        n in 1usize..12, m in 1usize..20, extra in 1usize..10, seed in any::<u64>(),
    ) {
        let g = make_grid(0.0, 1.0, n).unwrap();
        let a = simulate_paths(&g, m, 1, seed).unwrap();
        let b = simulate_paths(&g, m + extra, 1, seed).unwrap();
        prop_assert_eq!(a.primary().increments(), &b.primary().increments()[..m * n]);
        let again = simulate_paths(&g, m, 1, seed).unwrap();
        prop_assert_eq!(a.primary().increments(), again.primary().increments());
    }

    #[test]
    fn sup_norm_is_homogeneous(seed in any::<u64>(), c in -8.0f64..8.0) {
        let g = make_grid(0.0, 1.0, 4).unwrap();
        let f = field(&g, 5, seed);
        let mut cf = f.clone();
        cf.values_mut().iter_mut().for_each(|v| *v *= c);
        let (a, b) = (empirical_sup_norm(&f, 2.0).unwrap(), empirical_sup_norm(&cf, 2.0).unwrap());
        prop_assert!((b - c.abs() * a).abs() <= 1e-12 * (1.0 + b));
    }

    #[test]
    fn sup_norm_triangle_inequality(s1 in any::<u64>(), s2 in any::<u64>()) {
        let g = make_grid(0.0, 1.0, 4).unwrap();
        let (f, h) = (field(&g, 5, s1), field(&g, 5, s2));
        let mut sum = f.clone();
        sum.values_mut().iter_mut().zip(h.values()).for_each(|(a, b)| *a += b);
        let n = |x: &BiTemporalField| empirical_sup_norm(x, 2.0).unwrap();
        prop_assert!(n(&sum) <= n(&f) + n(&h) + 1e-12);
    }

    #[test]
    fn beta_norm_is_nondecreasing_in_beta(
        s1 in any::<u64>(), s2 in any::<u64>(), b in 0.0f64..5.0, db in 0.0f64..5.0,
    ) {
        let g = make_grid(0.0, 1.0, 4).unwrap();
        let (y, z) = (field(&g, 5, s1), field(&g, 5, s2));
        let lo = beta_norm(&y, &z, BetaNorm::new(b, 2.0).unwrap()).unwrap();
        let hi = beta_norm(&y, &z, BetaNorm::new(b + db, 2.0).unwrap()).unwrap();
        prop_assert!(lo <= hi * (1.0 + 1e-12));
    }

    #[test]
    fn slope_recovers_power_laws(k in -3.0f64..3.0, c in 0.1f64..10.0) {
        let xs = [0.1, 0.05, 0.025, 0.0125];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| c * x.powf(k)).collect();
        prop_assert!((loglog_slope(&xs, &ys).unwrap() - k).abs() <= 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn zero_generator_bsde_is_linear_in_terminal(
        a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..1000,
    ) {
        let e = simulate_paths(&make_grid(0.0, 1.0, 8).unwrap(), 200, 1, seed).unwrap();
        let solve = |ca: f64, cb: f64| {
            let spec = FnBsde::new(
                1,
                1,
                move |c, p, o| {
                    let w = p.brownian(c.path, c.s_idx, 0);
                    o[0] = ca * w.sin() + cb * w * w;
                },
                |_, _, _, _, o| o[0] = 0.0,
            );
            solve_bsde(&spec, &e, &RegressionBasis::default()).unwrap()
        };
        let (s1, s2, mix) = (solve(1.0, 0.0), solve(0.0, 1.0), solve(a, b));
        let y = |s: &bsvie_core::BsdeSolution| s.y.primary.values().to_vec();
        for ((u, v), w) in y(&s1).iter().zip(y(&s2)).zip(y(&mix)) {
            prop_assert!((w - a * u - b * v).abs() <= 1e-10 * (1.0 + w.abs()));
        }
    }

    #[test]
    fn ebsvie_eta_is_diagonal_and_terminal_is_free_term(
        a in -1.0f64..1.0, shift in -2.0f64..2.0, seed in 0u64..1000,
    ) {
        let e = simulate_paths(&make_grid(0.0, 1.0, 8).unwrap(), 100, 1, seed).unwrap();
        let spec = FnEbsvie::new(
            1,
            1,
            move |c, p, o| o[0] = c.t * p.brownian(c.path, c.s_idx, 0) + shift,
            move |_, eta, y, z, _, o| o[0] = a * eta[0] - 0.3 * y[0] + 0.1 * z[0],
        );
        let sol = solve_ebsvie(&spec, &e, &SolveOptions::default()).unwrap();
        prop_assert!(sol.report.converged);
        let w = |p: usize| e.primary().brownian(p, 8, 0);
        for p in 0..e.n_paths() {
            for t in 0..=8 {
                prop_assert_eq!(sol.eta.get(p, t, 0), sol.y.get(t, p, t, 0));
                let psi = e.grid().node(t) * w(p) + shift;
                prop_assert_eq!(sol.y.get(t, p, 8, 0), psi);
            }
        }
    }
}
