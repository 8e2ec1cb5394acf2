//! The H-function, the equilibrium check and a best-response search.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adjoint::{solve_adjoints, Adjoints};
use super::cost::{solve_cost_bsvie, CostSolution};
use super::{check_derivatives, solve_state_sde, ControlOptions, ControlPolicy, ControlProblem};
use crate::bsde::RegressionPlan;
use crate::error::{Error, Result};
use crate::fields::{AdaptedField, Paired};
use crate::grid::{PathEnsemble, PathRole};

/// Everything needed to evaluate H under an incumbent policy.
#[derive(Clone, Debug)]
pub struct EquilibriumBundle {
    pub policy: ControlPolicy,
    pub x_hat: Paired<AdaptedField>,
    pub cost: CostSolution,
    pub adjoints: Adjoints,
    /// `H(s_j, path, v)` at `[j][path][v]` for `j < N`.
    pub h_values: Paired<Vec<f64>>,
    pub n_controls: usize,
}

impl EquilibriumBundle {
    pub fn n_steps(&self) -> usize {
        self.x_hat.primary.n_nodes() - 1
    }

    pub fn n_paths(&self) -> usize {
        self.x_hat.primary.n_paths()
    }

    /// Stored `H` on the primary set.
    pub fn h(&self, node: usize, path: usize, v: usize) -> f64 {
        self.h_at(PathRole::Primary, node, path, v)
    }

    pub(crate) fn h_at(&self, role: PathRole, node: usize, path: usize, v: usize) -> f64 {
        self.h_values.get(role)[(node * self.n_paths() + path) * self.n_controls + v]
    }
}

struct HParts<'a> {
    problem: &'a dyn ControlProblem,
    x: &'a AdaptedField,
    y: &'a AdaptedField,
    diag_z: &'a AdaptedField,
    p_diag: &'a AdaptedField,
    diag_q: &'a AdaptedField,
    big_p: &'a crate::fields::BiTemporalField,
    policy: &'a ControlPolicy,
    role: PathRole,
    nodes: &'a [f64],
}

impl HParts<'_> {
    fn eval(&self, j: usize, path: usize, v: usize) -> f64 {
        let pb = self.problem;
        let n = pb.state_dim();
        let us = pb.control_set();
        let s = self.nodes[j];
        let x = self.x.at(path, j);
        let pss = self.p_diag.at(path, j);
        let dq = self.diag_q.at(path, j);
        let pmat = self.big_p.at(j, path, j);
        let (uv, uh) = (us[v], us[self.policy.index(self.role, path, j)]);
        let mut b = vec![0.0; n];
        let mut sv = vec![0.0; n];
        let mut sh = vec![0.0; n];
        pb.drift(s, uv, x, &mut b);
        pb.diffusion(s, uv, x, &mut sv);
        pb.diffusion(s, uh, x, &mut sh);
        let ds: Vec<f64> = sv.iter().zip(&sh).map(|(a, b)| a - b).collect();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let z = self.diag_z.get(path, j, 0) + dot(pss, &ds);
        let mut quad = 0.0;
        for r in 0..n {
            for c in 0..n {
                quad += ds[r] * pmat[r * n + c] * ds[c];
            }
        }
        dot(pss, &b)
            + dot(dq, &sv)
            + pb.running_cost(s, s, uv, x, self.y.get(path, j, 0), z)
            + 0.5 * quad
    }
}

fn h_parts<'a>(
    problem: &'a dyn ControlProblem,
    policy: &'a ControlPolicy,
    x: &'a Paired<AdaptedField>,
    cost: &'a CostSolution,
    adj: &'a Adjoints,
    role: PathRole,
) -> HParts<'a> {
    HParts {
        problem,
        x: x.get(role),
        y: cost.y_hat.get(role),
        diag_z: cost.diag_z.get(role),
        p_diag: adj.p_diag.get(role),
        diag_q: adj.diag_q.get(role),
        big_p: adj.big_p.get(role),
        policy,
        role,
        nodes: x.primary.grid().nodes(),
    }
}

/// `H(s_j, path, v)` on the primary set for the control with index `v`.
pub fn eval_h_function(
    problem: &dyn ControlProblem,
    bundle: &EquilibriumBundle,
    node: usize,
    path: usize,
    v: usize,
) -> Result<f64> {
    if v >= problem.control_set().len() {
        return Err(Error::UnknownControl(v));
    }
    if node >= bundle.n_steps() || path >= bundle.n_paths() {
        return Err(Error::InvalidArgument(format!(
            "cell ({node}, {path}) outside the bundle"
        )));
    }
    let parts = h_parts(
        problem,
        &bundle.policy,
        &bundle.x_hat,
        &bundle.cost,
        &bundle.adjoints,
        PathRole::Primary,
    );
    Ok(parts.eval(node, path, v))
}

pub(crate) fn check_horizon(problem: &dyn ControlProblem, ens: &PathEnsemble) -> Result<()> {
    let (t0, t1) = problem.horizon();
    let g = ens.grid();
    let tol = 1e-9 * g.dt();
    if (t0 - g.s_lo()).abs() > tol || (t1 - g.s_hi()).abs() > tol {
        return Err(Error::InvalidArgument(format!(
            "problem horizon [{t0}, {t1}] differs from grid [{}, {}]",
            g.s_lo(),
            g.s_hi()
        )));
    }
    Ok(())
}

/// State, cost, adjoints and the H-surface under `policy`.
pub fn build_bundle(
    problem: &dyn ControlProblem,
    policy: &ControlPolicy,
    ens: &PathEnsemble,
    opts: &ControlOptions,
) -> Result<EquilibriumBundle> {
    check_horizon(problem, ens)?;
    if opts.check_derivatives {
        check_derivatives(problem)?;
    }
    let plan = RegressionPlan::build(ens, &opts.solve.basis)?;
    build_with_plan(problem, policy, ens, &plan, opts)
}

pub(crate) fn build_with_plan(
    problem: &dyn ControlProblem,
    policy: &ControlPolicy,
    ens: &PathEnsemble,
    plan: &RegressionPlan,
    opts: &ControlOptions,
) -> Result<EquilibriumBundle> {
    let x = solve_state_sde(problem, policy, ens)?;
    let cost = solve_cost_bsvie(problem, policy, &x, ens, plan, opts)?;
    let adjoints = solve_adjoints(problem, policy, &x, &cost, ens, plan, opts)?;
    let nu = problem.control_set().len();
    let (n, mp) = (ens.grid().n_steps(), ens.n_paths());
    let surface = |role| {
        let parts = h_parts(problem, policy, &x, &cost, &adjoints, role);
        (0..n)
            .into_par_iter()
            .flat_map_iter(|j| {
                let parts = &parts;
                (0..mp).flat_map(move |p| (0..nu).map(move |v| parts.eval(j, p, v)))
            })
            .collect::<Vec<f64>>()
    };
    let h_values = Paired::new(surface(PathRole::Primary), surface(PathRole::Regression));
    if let Some(i) = h_values.primary.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            stage: "h-function",
            t_node: None,
            s_node: i / (mp * nu),
            path: (i / nu) % mp,
        });
    }
    Ok(EquilibriumBundle {
        policy: policy.clone(),
        x_hat: x,
        cost,
        adjoints,
        h_values,
        n_controls: nu,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorstCell {
    pub node: usize,
    pub path: usize,
    /// Index of the minimising control.
    pub control: usize,
    /// `H(û) - min_v H(v)`.
    pub gap: f64,
}

#[derive(Clone, Debug)]
pub struct EquilibriumCheck {
    /// `dt · #{cells with min_v H(v) < H(û) - tol_h} / M`.
    pub violation_measure: f64,
    pub tol_h: f64,
    pub worst_cells: Vec<WorstCell>,
    pub bundle: EquilibriumBundle,
}

fn argmin(bundle: &EquilibriumBundle, role: PathRole, j: usize, p: usize) -> (usize, f64) {
    let mut best = (0, bundle.h_at(role, j, p, 0));
    for v in 1..bundle.n_controls {
        let h = bundle.h_at(role, j, p, v);
        if h < best.1 {
            best = (v, h);
        }
    }
    best
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let k = v.len() / 2;
    if v.len() % 2 == 1 {
        v[k]
    } else {
        0.5 * (v[k - 1] + v[k])
    }
}

pub(crate) fn evaluate(bundle: EquilibriumBundle, tol_h: Option<f64>) -> EquilibriumCheck {
    let (n, mp) = (bundle.n_steps(), bundle.n_paths());
    let pol = &bundle.policy;
    let role = PathRole::Primary;
    let incumbent = |j: usize, p: usize| bundle.h_at(role, j, p, pol.index(role, p, j));
    let tol_h = tol_h.unwrap_or_else(|| {
        let scale = median(
            (0..n)
                .flat_map(|j| (0..mp).map(move |p| (j, p)))
                .map(|(j, p)| incumbent(j, p).abs())
                .collect(),
        );
        (1e-2 * scale).max(1e-10)
    });
    let mut bad = Vec::new();
    for j in 0..n {
        for p in 0..mp {
            let (v, h) = argmin(&bundle, role, j, p);
            let gap = incumbent(j, p) - h;
            if gap > tol_h {
                bad.push(WorstCell {
                    node: j,
                    path: p,
                    control: v,
                    gap,
                });
            }
        }
    }
    let dt = bundle.x_hat.primary.grid().dt();
    let violation_measure = dt * bad.len() as f64 / mp as f64;
    bad.sort_by(|a, b| {
        b.gap
            .total_cmp(&a.gap)
            .then(a.node.cmp(&b.node))
            .then(a.path.cmp(&b.path))
    });
    bad.truncate(10);
    EquilibriumCheck {
        violation_measure,
        tol_h,
        worst_cells: bad,
        bundle,
    }
}

/// Measures the set of cells where some control lowers H below `H(û) - tol_h`.
pub fn check_equilibrium(
    problem: &dyn ControlProblem,
    policy: &ControlPolicy,
    ens: &PathEnsemble,
    opts: &ControlOptions,
) -> Result<EquilibriumCheck> {
    Ok(evaluate(
        build_bundle(problem, policy, ens, opts)?,
        opts.tol_h,
    ))
}

#[derive(Clone, Debug)]
pub struct SearchOptions {
    pub max_rounds: usize,
    /// Fraction of cells that keep the incumbent control; `None` starts undamped
    /// and switches to one half after a 2-cycle.
    pub damping: Option<f64>,
    /// Stop once the violation measure is at most this fraction of `T - t₀`.
    pub tolerance: f64,
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self {
            max_rounds: 10,
            damping: None,
            tolerance: 1e-2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub policy: ControlPolicy,
    /// Violation measure of every checked policy, starting with the initial one.
    pub history: Vec<f64>,
    /// Number of policy updates.
    pub rounds: usize,
    pub converged: bool,
    /// Period of a detected policy cycle.
    pub cycle: Option<usize>,
    pub damping_used: bool,
    pub last_check: EquilibriumCheck,
}

fn keep_cell(round: usize, role: PathRole, j: usize, p: usize, frac: f64) -> bool {
    let mut h = (round as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (j as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9)
        ^ (p as u64).wrapping_mul(0x94D0_49BB_1331_11EB)
        ^ (role == PathRole::Regression) as u64;
    h ^= h >> 31;
    h = h.wrapping_mul(0xD6E8_FEB8_6659_FD93);
    h ^= h >> 32;
    (h as f64 / u64::MAX as f64) < frac
}

/// Best-response iteration on the H-function from `initial`.
pub fn search_equilibrium(
    problem: &dyn ControlProblem,
    initial: &ControlPolicy,
    ens: &PathEnsemble,
    opts: &ControlOptions,
    search: &SearchOptions,
) -> Result<SearchOutcome> {
    check_horizon(problem, ens)?;
    if opts.check_derivatives {
        check_derivatives(problem)?;
    }
    let plan = RegressionPlan::build(ens, &opts.solve.basis)?;
    let (t0, t1) = problem.horizon();
    let target = search.tolerance * (t1 - t0);
    let mut damping = search.damping;
    let mut damping_used = damping.is_some();
    let mut policy = initial.clone();
    let mut prints = vec![policy.fingerprint()];
    let mut history = Vec::new();
    let mut rounds = 0;
    loop {
        let check = evaluate(
            build_with_plan(problem, &policy, ens, &plan, opts)?,
            opts.tol_h,
        );
        history.push(check.violation_measure);
        let done = |converged, cycle, check, policy, rounds| SearchOutcome {
            policy,
            history: history.clone(),
            rounds,
            converged,
            cycle,
            damping_used,
            last_check: check,
        };
        if check.violation_measure <= target {
            return Ok(done(true, None, check, policy, rounds));
        }
        if rounds >= search.max_rounds {
            return Ok(done(false, None, check, policy, rounds));
        }
        rounds += 1;
        let b = &check.bundle;
        let (mp, nn) = (policy.n_paths(), policy.n_nodes());
        let mut next = policy.raw().clone();
        for role in PathRole::BOTH {
            let v = match role {
                PathRole::Primary => &mut next.primary,
                PathRole::Regression => &mut next.regression,
            };
            for p in 0..mp {
                for j in 0..nn - 1 {
                    let cur = policy.index(role, p, j);
                    let (best, h) = argmin(b, role, j, p);
                    if b.h_at(role, j, p, cur) - h <= check.tol_h {
                        continue;
                    }
                    if damping.is_some_and(|f| keep_cell(rounds, role, j, p, f)) {
                        continue;
                    }
                    v[p * nn + j] = best;
                }
                // the terminal node never enters the dynamics
                v[p * nn + nn - 1] = v[p * nn + nn - 2];
            }
        }
        let candidate = ControlPolicy::from_raw(mp, nn, next);
        let fp = candidate.fingerprint();
        let back = prints
            .iter()
            .rev()
            .take(4)
            .position(|&q| q == fp)
            .map(|k| k + 1);
        prints.push(fp);
        match back {
            Some(1) => return Ok(done(false, Some(1), check, policy, rounds)),
            Some(2) if damping.is_none() => {
                damping = Some(0.5);
                damping_used = true;
            }
            Some(k) => return Ok(done(false, Some(k), check, candidate, rounds)),
            None => {}
        }
        policy = candidate;
    }
}
