use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use bsvie_bench::{ensemble, equation};
use bsvie_core::bsde::FnBsde;
use bsvie_core::control::toy::ScalarToy;
use bsvie_core::oracles::{o2_martingale, o3_volterra};
use bsvie_core::{
    check_equilibrium, compute_diag, make_grid, simulate_paths, solve_bsde,
    solve_derivative_ebsvie, solve_ebsvie, ControlOptions, ControlPolicy, RegressionBasis,
    SolveOptions,
};

fn paths(c: &mut Criterion) {
    let g = make_grid(0.0, 1.0, 64).unwrap();
    c.bench_function("simulate_paths 64x10000", |b| {
        b.iter(|| simulate_paths(&g, 10_000, 1, 1).unwrap())
    });
}

fn bsde(c: &mut Criterion) {
    let spec = FnBsde::new(
        1,
        1,
        |cell, p, o| o[0] = p.brownian(cell.path, cell.s_idx, 0).powi(2),
        |_, y, z, _, o| o[0] = -0.5 * y[0] + 0.3 * z[0].sin(),
    );
    let mut group = c.benchmark_group("solve_bsde");
    for m in [1_000, 10_000] {
        let e = ensemble(32, m, 2);
        group.bench_with_input(BenchmarkId::from_parameter(m), &e, |b, e| {
            b.iter(|| solve_bsde(&spec, e, &RegressionBasis::default()).unwrap())
        });
    }
    group.finish();
}

fn ebsvie(c: &mut Criterion) {
    let o3 = equation(&o3_volterra(0.5, 1.0));
    let mut group = c.benchmark_group("solve_ebsvie_o3");
    group.sample_size(10);
    for n in [32, 64] {
        let e = ensemble(n, 16, 3);
        group.bench_with_input(BenchmarkId::from_parameter(n), &e, |b, e| {
            b.iter(|| solve_ebsvie(o3.as_ref(), e, &SolveOptions::default()).unwrap())
        });
    }
    group.finish();

    let o2 = equation(&o2_martingale());
    let e = ensemble(16, 1_000, 4);
    let so = SolveOptions::default();
    let sol = solve_ebsvie(o2.as_ref(), &e, &so).unwrap();
    let mut group = c.benchmark_group("diagonal_o2");
    group.sample_size(10);
    group.bench_function("derivative_and_diag", |b| {
        b.iter(|| {
            let der = solve_derivative_ebsvie(o2.as_ref(), &e, &sol, &so).unwrap();
            compute_diag(&sol.z, &der.dz).unwrap()
        })
    });
    group.finish();
}

fn control(c: &mut Criterion) {
    let toy = ScalarToy::quadratic();
    let e = ensemble(16, 200, 5);
    let pol = ControlPolicy::constant(&e, 1);
    let opts = ControlOptions::default();
    let mut group = c.benchmark_group("control");
    group.sample_size(10);
    group.bench_function("check_equilibrium", |b| {
        b.iter(|| check_equilibrium(&toy, &pol, &e, &opts).unwrap())
    });
    group.finish();
}

criterion_group!(benches, paths, bsde, ebsvie, control);
criterion_main!(benches);
