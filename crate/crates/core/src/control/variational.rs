//! Spike variations: first/second-order state expansions and the cost
//! representation through the H-function.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::equilibrium::{build_bundle, check_horizon};
use super::{
    solve_cost_bsvie, solve_state_sde, ControlOptions, ControlPolicy, ControlProblem, Restricted,
};
use crate::bsde::{solve_bsde_with_plan, FnBsde, RegressionPlan};
use crate::error::{Error, Result};
use crate::fields::{AdaptedField, Paired};
use crate::grid::{PathEnsemble, PathRole};
use crate::rates::loglog_slope;

/// Replace the control by index `control` on `[τ, τ + ε)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Spike {
    pub tau_node: usize,
    pub control: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariationalRow {
    pub eps: f64,
    /// `Ê sup |X₁|²`.
    pub x1_sup2: f64,
    /// `Ê sup |X₂|²`.
    pub x2_sup2: f64,
    /// `Ê sup |Xᵉ - X̂ - X₁ - X₂|²`.
    pub remainder_sup2: f64,
    /// `Ê[|Rᵉ|²]^{1/2}`.
    pub residual_rms: f64,
    /// `Ê[J(τ; uᵉ) - J(τ; û)]`.
    pub cost_change: f64,
    /// `Ê ∫ (H(v) - H(û)) ds` over the spike.
    pub h_integral: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariationalReport {
    pub rows: Vec<VariationalRow>,
    /// Requested ε that overrun the horizon.
    pub skipped: Vec<f64>,
    pub slope_x1: Option<f64>,
    pub slope_x2: Option<f64>,
    pub slope_remainder: Option<f64>,
    pub slope_residual: Option<f64>,
}

/// Variational diagnostics of `policy` for a spike at `spike.tau_node`.
/// The cost part runs on `[τ, T]` with the first `cost_paths` paths.
#[allow(clippy::too_many_arguments)]
pub fn variational_rates(
    problem: &dyn ControlProblem,
    policy: &ControlPolicy,
    spike: Spike,
    eps_set: &[f64],
    ens: &PathEnsemble,
    opts: &ControlOptions,
    cost_paths: usize,
) -> Result<VariationalReport> {
    check_horizon(problem, ens)?;
    let us = problem.control_set();
    if spike.control >= us.len() {
        return Err(Error::UnknownControl(spike.control));
    }
    let grid = ens.grid();
    let n_steps = grid.n_steps();
    let tau = spike.tau_node;
    if tau >= n_steps {
        return Err(Error::InvalidArgument(format!(
            "spike node {tau} is not before T"
        )));
    }
    let mut steps = Vec::new();
    let mut skipped = Vec::new();
    for &eps in eps_set {
        let k = grid
            .steps_for(eps)
            .ok_or_else(|| Error::InvalidArgument(format!("ε = {eps} is not a multiple of dt")))?;
        if tau + k > n_steps {
            skipped.push(eps);
        } else {
            steps.push((eps, k));
        }
    }

    let x_hat = solve_state_sde(problem, policy, ens)?;

    // cost side on the sub-horizon
    let rens = ens.restrict(tau)?.truncate(cost_paths.min(ens.n_paths()))?;
    let rp = rens.n_paths();
    let rprob = Restricted::at_node(problem, &x_hat, tau, rp);
    let r_policy = policy.restrict(tau, rp)?;
    let bundle = build_bundle(&rprob, &r_policy, &rens, opts)?;
    let plan = RegressionPlan::build(&rens, &opts.solve.basis)?;
    let j_hat = &bundle.cost.y_hat;

    let mut rows = Vec::new();
    for &(eps, k) in &steps {
        let pert = policy.with_spike(tau, tau + k, spike.control);
        let x_eps = solve_state_sde(problem, &pert, ens)?;
        let (x1s, x2s, rem) = expansions(
            problem,
            policy,
            spike.control,
            &x_hat.primary,
            &x_eps.primary,
            ens,
            tau,
            k,
        );

        let r_pert = pert.restrict(tau, rp)?;
        let rx = solve_state_sde(&rprob, &r_pert, &rens)?;
        let j_eps = solve_cost_bsvie(&rprob, &r_pert, &rx, &rens, &plan, opts)?.y_hat;

        // Ê_τ ∫ (H(v) - H(û)) ds as the value at τ of a BSDE with that driver
        let nu = bundle.n_controls;
        let gap = |role: PathRole| -> Vec<f64> {
            (0..k)
                .flat_map(|j| (0..rp).map(move |p| (j, p)))
                .map(|(j, p)| {
                    let cur = r_policy.index(role, p, j);
                    bundle.h_at(role, j, p, spike.control) - bundle.h_at(role, j, p, cur)
                })
                .collect()
        };
        let gaps = Arc::new(Paired::new(
            gap(PathRole::Primary),
            gap(PathRole::Regression),
        ));
        debug_assert!(nu > spike.control);
        let spec = FnBsde::new(
            1,
            1,
            |_, _, o| o[0] = 0.0,
            move |c, _, _, _, o| {
                o[0] = if c.s_idx < k {
                    gaps.get(c.role)[c.s_idx * rp + c.path]
                } else {
                    0.0
                };
            },
        );
        let h_int = solve_bsde_with_plan(&spec, &rens, &plan, &opts.solve.scheme)?.y;

        let (mut r2, mut dj, mut hi) = (0.0, 0.0, 0.0);
        for p in 0..rp {
            let d = j_eps.primary.get(p, 0, 0) - j_hat.primary.get(p, 0, 0);
            let h = h_int.primary.get(p, 0, 0);
            r2 += (d - h).powi(2);
            dj += d;
            hi += h;
        }
        rows.push(VariationalRow {
            eps,
            x1_sup2: x1s,
            x2_sup2: x2s,
            remainder_sup2: rem,
            residual_rms: (r2 / rp as f64).sqrt(),
            cost_change: dj / rp as f64,
            h_integral: hi / rp as f64,
        });
    }

    let eps: Vec<f64> = rows.iter().map(|r| r.eps).collect();
    let slope =
        |f: fn(&VariationalRow) -> f64| loglog_slope(&eps, &rows.iter().map(f).collect::<Vec<_>>());
    Ok(VariationalReport {
        slope_x1: slope(|r| r.x1_sup2),
        slope_x2: slope(|r| r.x2_sup2),
        slope_remainder: slope(|r| r.remainder_sup2),
        slope_residual: slope(|r| r.residual_rms),
        rows,
        skipped,
    })
}

/// Euler schemes of the first- and second-order variational equations on
/// the primary set; returns the three sup-moments.
#[allow(clippy::too_many_arguments)]
fn expansions(
    problem: &dyn ControlProblem,
    policy: &ControlPolicy,
    v: usize,
    x_hat: &AdaptedField,
    x_eps: &AdaptedField,
    ens: &PathEnsemble,
    tau: usize,
    k: usize,
) -> (f64, f64, f64) {
    let n = problem.state_dim();
    let us = problem.control_set();
    let grid = ens.grid();
    let dt = grid.dt();
    let paths = ens.primary();
    let (mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0);
    let mut bx = vec![0.0; n * n];
    let mut sx = vec![0.0; n * n];
    let mut sxv = vec![0.0; n * n];
    let mut bxx = vec![0.0; n * n * n];
    let mut sxx = vec![0.0; n * n * n];
    let (mut bv, mut bh, mut sv, mut sh) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for p in 0..ens.n_paths() {
        let mut x1 = vec![0.0; n];
        let mut x2 = vec![0.0; n];
        let (mut m1, mut m2, mut m3): (f64, f64, f64) = (0.0, 0.0, 0.0);
        for j in tau..grid.n_steps() {
            let s = grid.node(j);
            let xh = x_hat.at(p, j);
            let uh = us[policy.index(PathRole::Primary, p, j)];
            let on = j < tau + k;
            problem.drift_x(s, uh, xh, &mut bx);
            problem.diffusion_x(s, uh, xh, &mut sx);
            problem.drift_xx(s, uh, xh, &mut bxx);
            problem.diffusion_xx(s, uh, xh, &mut sxx);
            if on {
                problem.drift(s, us[v], xh, &mut bv);
                problem.drift(s, uh, xh, &mut bh);
                problem.diffusion(s, us[v], xh, &mut sv);
                problem.diffusion(s, uh, xh, &mut sh);
                problem.diffusion_x(s, us[v], xh, &mut sxv);
            }
            let dw = paths.increment(p, j, 0);
            let mut n1 = x1.clone();
            let mut n2 = x2.clone();
            for i in 0..n {
                let lin = |m: &[f64], x: &[f64]| (0..n).map(|l| m[i * n + l] * x[l]).sum::<f64>();
                let quad = |h: &[f64]| {
                    let mut acc = 0.0;
                    for a in 0..n {
                        for b in 0..n {
                            acc += h[i * n * n + a * n + b] * x1[a] * x1[b];
                        }
                    }
                    acc
                };
                let (db, ds) = if on {
                    (bv[i] - bh[i], sv[i] - sh[i])
                } else {
                    (0.0, 0.0)
                };
                let dsx = if on {
                    (0..n)
                        .map(|l| (sxv[i * n + l] - sx[i * n + l]) * x1[l])
                        .sum::<f64>()
                } else {
                    0.0
                };
                n1[i] += lin(&bx, &x1) * dt + (lin(&sx, &x1) + ds) * dw;
                n2[i] += (lin(&bx, &x2) + db + 0.5 * quad(&bxx)) * dt
                    + (lin(&sx, &x2) + dsx + 0.5 * quad(&sxx)) * dw;
            }
            x1 = n1;
            x2 = n2;
            let sq = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
            let r: Vec<f64> = (0..n)
                .map(|i| x_eps.get(p, j + 1, i) - x_hat.get(p, j + 1, i) - x1[i] - x2[i])
                .collect();
            m1 = m1.max(sq(&x1));
            m2 = m2.max(sq(&x2));
            m3 = m3.max(sq(&r));
        }
        s1 += m1;
        s2 += m2;
        s3 += m3;
    }
    let mp = ens.n_paths() as f64;
    (s1 / mp, s2 / mp, s3 / mp)
}
