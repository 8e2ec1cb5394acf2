//! Time-inconsistent recursive control with one Brownian motion.
//!
//! State `dX = b(s,u,X)ds + σ(s,u,X)dW`, recursive cost given by the
//! Type-I BSVIE with free term `h(t, X(T))` and generator
//! `f(t, s, u(s), X(s), Y(s), Z(t,s))`. Controls range over a finite set of
//! scalar points and policies store indices into it.

mod adjoint;
mod cost;
mod equilibrium;
pub mod toy;
mod variational;

use std::hash::{Hash, Hasher};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub use adjoint::{solve_adjoints, Adjoints};
pub use cost::{solve_cost_bsvie, CostSolution};
pub use equilibrium::{
    build_bundle, check_equilibrium, eval_h_function, search_equilibrium, EquilibriumBundle,
    EquilibriumCheck, SearchOptions, SearchOutcome, WorstCell,
};
pub use variational::{variational_rates, Spike, VariationalReport, VariationalRow};

use crate::bsde::SchemeParams;
use crate::ebsvie::SolveOptions;
use crate::error::{Error, Result};
use crate::fields::{AdaptedField, Paired};
use crate::grid::{PathEnsemble, PathRole};

/// Coefficients of a control problem with `n`-dimensional state and `d = 1`.
///
/// Matrix outputs are row-major: `b_x[i * n + j] = ∂b_i/∂x_j`,
/// `b_xx[i * n * n + j * n + k] = ∂²b_i/∂x_j∂x_k`. Cost gradients and Hessians
/// are taken in `(x, y, z)`, so they have `n + 2` and `(n + 2)²` entries.
pub trait ControlProblem: Sync {
    fn state_dim(&self) -> usize;

    fn control_set(&self) -> &[f64];

    /// `(t₀, T)`.
    fn horizon(&self) -> (f64, f64);

    fn initial_state(&self, role: PathRole, path: usize, out: &mut [f64]);

    fn lipschitz(&self) -> f64 {
        1.0
    }

    fn drift(&self, s: f64, u: f64, x: &[f64], out: &mut [f64]);
    fn drift_x(&self, s: f64, u: f64, x: &[f64], out: &mut [f64]);
    fn drift_xx(&self, s: f64, u: f64, x: &[f64], out: &mut [f64]);

    fn diffusion(&self, s: f64, u: f64, x: &[f64], out: &mut [f64]);
    fn diffusion_x(&self, s: f64, u: f64, x: &[f64], out: &mut [f64]);
    fn diffusion_xx(&self, s: f64, u: f64, x: &[f64], out: &mut [f64]);

    fn running_cost(&self, t: f64, s: f64, u: f64, x: &[f64], y: f64, z: f64) -> f64;
    fn running_cost_grad(&self, t: f64, s: f64, u: f64, x: &[f64], y: f64, z: f64, out: &mut [f64]);
    fn running_cost_hess(&self, t: f64, s: f64, u: f64, x: &[f64], y: f64, z: f64, out: &mut [f64]);
    fn running_cost_dt(&self, t: f64, s: f64, u: f64, x: &[f64], y: f64, z: f64) -> f64;
    fn running_cost_grad_dt(
        &self,
        t: f64,
        s: f64,
        u: f64,
        x: &[f64],
        y: f64,
        z: f64,
        out: &mut [f64],
    );

    fn terminal_cost(&self, t: f64, x: &[f64]) -> f64;
    fn terminal_cost_x(&self, t: f64, x: &[f64], out: &mut [f64]);
    fn terminal_cost_xx(&self, t: f64, x: &[f64], out: &mut [f64]);
    fn terminal_cost_dt(&self, t: f64, x: &[f64]) -> f64;
    fn terminal_cost_x_dt(&self, t: f64, x: &[f64], out: &mut [f64]);
}

/// Indices into the control set, per path and node, on both path sets.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlPolicy {
    n_paths: usize,
    n_nodes: usize,
    idx: Arc<Paired<Vec<usize>>>,
}

impl ControlPolicy {
    pub fn constant(ens: &PathEnsemble, index: usize) -> Self {
        let len = ens.n_paths() * ens.grid().n_nodes();
        Self {
            n_paths: ens.n_paths(),
            n_nodes: ens.grid().n_nodes(),
            idx: Arc::new(Paired::new(vec![index; len], vec![index; len])),
        }
    }

    /// `f(role, path, node)` must only read information up to `node`.
    pub fn from_fn(ens: &PathEnsemble, mut f: impl FnMut(PathRole, usize, usize) -> usize) -> Self {
        let (mp, nn) = (ens.n_paths(), ens.grid().n_nodes());
        let mut build = |role| {
            let mut v = Vec::with_capacity(mp * nn);
            for p in 0..mp {
                for j in 0..nn {
                    v.push(f(role, p, j));
                }
            }
            v
        };
        let prim = build(PathRole::Primary);
        let reg = build(PathRole::Regression);
        Self {
            n_paths: mp,
            n_nodes: nn,
            idx: Arc::new(Paired::new(prim, reg)),
        }
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    #[inline]
    pub fn index(&self, role: PathRole, path: usize, node: usize) -> usize {
        self.idx.get(role)[path * self.n_nodes + node]
    }

    pub fn validate(&self, n_controls: usize, ens: &PathEnsemble) -> Result<()> {
        if self.n_paths != ens.n_paths() || self.n_nodes != ens.grid().n_nodes() {
            return Err(Error::ShapeMismatch(
                "policy does not match the ensemble".into(),
            ));
        }
        for role in PathRole::BOTH {
            if let Some(&bad) = self.idx.get(role).iter().find(|&&i| i >= n_controls) {
                return Err(Error::UnknownControl(bad));
            }
        }
        Ok(())
    }

    /// Policy on the grid restricted to start at node `from`, first `n_paths` paths.
    pub fn restrict(&self, from: usize, n_paths: usize) -> Result<Self> {
        if from >= self.n_nodes || n_paths > self.n_paths || n_paths == 0 {
            return Err(Error::InvalidArgument(format!(
                "cannot restrict policy to node {from}, {n_paths} paths"
            )));
        }
        let nn = self.n_nodes - from;
        let cut = |v: &Vec<usize>| {
            (0..n_paths)
                .flat_map(|p| {
                    v[p * self.n_nodes + from..(p + 1) * self.n_nodes]
                        .iter()
                        .copied()
                })
                .collect::<Vec<_>>()
        };
        Ok(Self {
            n_paths,
            n_nodes: nn,
            idx: Arc::new(Paired::new(
                cut(&self.idx.primary),
                cut(&self.idx.regression),
            )),
        })
    }

    /// Replaces the control on nodes `[from, to)` by `index`.
    pub fn with_spike(&self, from: usize, to: usize, index: usize) -> Self {
        let mut idx = (*self.idx).clone();
        for v in [&mut idx.primary, &mut idx.regression] {
            for p in 0..self.n_paths {
                for j in from..to.min(self.n_nodes) {
                    v[p * self.n_nodes + j] = index;
                }
            }
        }
        Self {
            idx: Arc::new(idx),
            ..self.clone()
        }
    }

    /// Primary-set indices as a one-component field.
    pub fn to_field(&self, ens: &PathEnsemble) -> AdaptedField {
        AdaptedField::from_fn(ens.grid(), self.n_paths, 1, |p, j, o| {
            o[0] = self.index(PathRole::Primary, p, j) as f64
        })
    }

    pub(crate) fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.idx.primary.hash(&mut h);
        self.idx.regression.hash(&mut h);
        h.finish()
    }

    pub(crate) fn raw(&self) -> &Paired<Vec<usize>> {
        &self.idx
    }

    pub(crate) fn from_raw(n_paths: usize, n_nodes: usize, idx: Paired<Vec<usize>>) -> Self {
        Self {
            n_paths,
            n_nodes,
            idx: Arc::new(idx),
        }
    }
}

/// Settings for the control pipeline.
#[derive(Clone, Debug)]
pub struct ControlOptions {
    /// Solver settings for the cost and adjoint equations. The default uses
    /// the left-point (θ = 1) scheme so that piecewise-constant controls are
    /// integrated exactly.
    pub solve: SolveOptions,
    /// H-tolerance of the equilibrium check; `None` takes `1e-2 · median |H(û)|`.
    pub tol_h: Option<f64>,
    /// Finite-difference check of the derivative callbacks before solving.
    pub check_derivatives: bool,
}

impl Default for ControlOptions {
    fn default() -> Self {
        Self {
            solve: SolveOptions {
                scheme: SchemeParams::explicit(),
                ..SolveOptions::default()
            },
            tol_h: None,
            check_derivatives: true,
        }
    }
}

/// Euler–Maruyama state on both path sets, `[path][node][n]`.
pub fn solve_state_sde(
    problem: &dyn ControlProblem,
    policy: &ControlPolicy,
    ens: &PathEnsemble,
) -> Result<Paired<AdaptedField>> {
    let n = problem.state_dim();
    if ens.dim() != 1 {
        return Err(Error::InvalidArgument(
            "control problems use one Brownian motion".into(),
        ));
    }
    let us = problem.control_set();
    policy.validate(us.len(), ens)?;
    let grid = ens.grid();
    let dt = grid.dt();
    let run = |role: PathRole| -> Result<AdaptedField> {
        let paths = ens.set(role);
        let mut x = AdaptedField::zeros(grid, ens.n_paths(), n);
        let mut b = vec![0.0; n];
        let mut sg = vec![0.0; n];
        let mut cur = vec![0.0; n];
        for p in 0..ens.n_paths() {
            problem.initial_state(role, p, &mut cur);
            x.at_mut(p, 0).copy_from_slice(&cur);
            for j in 0..grid.n_steps() {
                let u = us[policy.index(role, p, j)];
                problem.drift(grid.node(j), u, &cur, &mut b);
                problem.diffusion(grid.node(j), u, &cur, &mut sg);
                let dw = paths.increment(p, j, 0);
                for i in 0..n {
                    cur[i] += b[i] * dt + sg[i] * dw;
                }
                if let Some(i) = cur.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        stage: "state sde",
                        t_node: None,
                        s_node: j + 1,
                        path: p * n + i,
                    });
                }
                x.at_mut(p, j + 1).copy_from_slice(&cur);
            }
        }
        Ok(x)
    };
    Ok(Paired::new(
        run(PathRole::Primary)?,
        run(PathRole::Regression)?,
    ))
}

/// A problem started at a later node from given states.
pub struct Restricted<'a> {
    pub inner: &'a dyn ControlProblem,
    pub t0: f64,
    /// `[path][n]` per path set.
    pub x0: Paired<Vec<f64>>,
}

impl<'a> Restricted<'a> {
    /// Starts `inner` at node `from` of `x`, keeping the first `n_paths` paths.
    pub fn at_node(
        inner: &'a dyn ControlProblem,
        x: &Paired<AdaptedField>,
        from: usize,
        n_paths: usize,
    ) -> Self {
        let n = inner.state_dim();
        let take = |f: &AdaptedField| {
            (0..n_paths)
                .flat_map(|p| f.at(p, from)[..n].to_vec())
                .collect::<Vec<_>>()
        };
        Self {
            inner,
            t0: x.primary.grid().node(from),
            x0: Paired::new(take(&x.primary), take(&x.regression)),
        }
    }
}

impl ControlProblem for Restricted<'_> {
    fn state_dim(&self) -> usize {
        self.inner.state_dim()
    }
    fn control_set(&self) -> &[f64] {
        self.inner.control_set()
    }
    fn horizon(&self) -> (f64, f64) {
        (self.t0, self.inner.horizon().1)
    }
    fn initial_state(&self, role: PathRole, path: usize, out: &mut [f64]) {
        let n = out.len();
        out.copy_from_slice(&self.x0.get(role)[path * n..(path + 1) * n]);
    }
    fn lipschitz(&self) -> f64 {
        self.inner.lipschitz()
    }
    fn drift(&self, s: f64, u: f64, x: &[f64], out: &mut [f64]) {
        self.inner.drift(s, u, x, out)
    }
    fn drift_x(&self, s: f64, u: f64, x: &[f64], out: &mut [f64]) {
        self.inner.drift_x(s, u, x, out)
    }
    fn drift_xx(&self, s: f64, u: f64, x: &[f64], out: &mut [f64]) {
        self.inner.drift_xx(s, u, x, out)
    }
    fn diffusion(&self, s: f64, u: f64, x: &[f64], out: &mut [f64]) {
        self.inner.diffusion(s, u, x, out)
    }
    fn diffusion_x(&self, s: f64, u: f64, x: &[f64], out: &mut [f64]) {
        self.inner.diffusion_x(s, u, x, out)
    }
    fn diffusion_xx(&self, s: f64, u: f64, x: &[f64], out: &mut [f64]) {
        self.inner.diffusion_xx(s, u, x, out)
    }
    fn running_cost(&self, t: f64, s: f64, u: f64, x: &[f64], y: f64, z: f64) -> f64 {
        self.inner.running_cost(t, s, u, x, y, z)
    }
    fn running_cost_grad(
        &self,
        t: f64,
        s: f64,
        u: f64,
        x: &[f64],
        y: f64,
        z: f64,
        out: &mut [f64],
    ) {
        self.inner.running_cost_grad(t, s, u, x, y, z, out)
    }
    fn running_cost_hess(
        &self,
        t: f64,
        s: f64,
        u: f64,
        x: &[f64],
        y: f64,
        z: f64,
        out: &mut [f64],
    ) {
        self.inner.running_cost_hess(t, s, u, x, y, z, out)
    }
    fn running_cost_dt(&self, t: f64, s: f64, u: f64, x: &[f64], y: f64, z: f64) -> f64 {
        self.inner.running_cost_dt(t, s, u, x, y, z)
    }
    fn running_cost_grad_dt(
        &self,
        t: f64,
        s: f64,
        u: f64,
        x: &[f64],
        y: f64,
        z: f64,
        out: &mut [f64],
    ) {
        self.inner.running_cost_grad_dt(t, s, u, x, y, z, out)
    }
    fn terminal_cost(&self, t: f64, x: &[f64]) -> f64 {
        self.inner.terminal_cost(t, x)
    }
    fn terminal_cost_x(&self, t: f64, x: &[f64], out: &mut [f64]) {
        self.inner.terminal_cost_x(t, x, out)
    }
    fn terminal_cost_xx(&self, t: f64, x: &[f64], out: &mut [f64]) {
        self.inner.terminal_cost_xx(t, x, out)
    }
    fn terminal_cost_dt(&self, t: f64, x: &[f64]) -> f64 {
        self.inner.terminal_cost_dt(t, x)
    }
    fn terminal_cost_x_dt(&self, t: f64, x: &[f64], out: &mut [f64]) {
        self.inner.terminal_cost_x_dt(t, x, out)
    }
}

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;

fn fd_compare(name: &'static str, analytic: &[f64], fd: &[f64]) -> Result<()> {
    for (a, b) in analytic.iter().zip(fd) {
        let rel = (a - b).abs() / a.abs().max(b.abs()).max(1.0);
        if !(rel <= FD_TOL) {
            return Err(Error::DerivativeCheck {
                name: name.into(),
                rel_err: rel,
            });
        }
    }
    Ok(())
}

/// Central-difference check of every derivative callback at 20 seeded points.
pub fn check_derivatives(problem: &dyn ControlProblem) -> Result<()> {
    let n = problem.state_dim();
    let us = problem.control_set();
    if us.is_empty() {
        return Err(Error::InvalidArgument("empty control set".into()));
    }
    let (t0, t1) = problem.horizon();
    let mut rng = ChaCha8Rng::seed_from_u64(0xFD_C0DE);
    let h = FD_STEP;
    let k = n + 2;
    for _ in 0..20 {
        let s = t0 + (t1 - t0) * rng.random::<f64>();
        let t = t0 + (t1 - t0) * rng.random::<f64>();
        let u = us[rng.random_range(0..us.len())];
        let x: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let y: f64 = rng.sample(StandardNormal);
        let z: f64 = rng.sample(StandardNormal);

        // b, σ and their x-derivatives
        type Coef<'a> = &'a dyn Fn(f64, f64, &[f64], &mut [f64]);
        let pairs: [(&'static str, Coef, Coef, Coef); 2] = [
            (
                "b",
                &|s, u, x, o| problem.drift(s, u, x, o),
                &|s, u, x, o| problem.drift_x(s, u, x, o),
                &|s, u, x, o| problem.drift_xx(s, u, x, o),
            ),
            (
                "sigma",
                &|s, u, x, o| problem.diffusion(s, u, x, o),
                &|s, u, x, o| problem.diffusion_x(s, u, x, o),
                &|s, u, x, o| problem.diffusion_xx(s, u, x, o),
            ),
        ];
        for (name, f, fx, fxx) in pairs {
            let mut jac = vec![0.0; n * n];
            let mut hess = vec![0.0; n * n * n];
            fx(s, u, &x, &mut jac);
            fxx(s, u, &x, &mut hess);
            let mut fd_j = vec![0.0; n * n];
            let mut fd_h = vec![0.0; n * n * n];
            let (mut a, mut b) = (vec![0.0; n], vec![0.0; n]);
            let (mut ja, mut jb) = (vec![0.0; n * n], vec![0.0; n * n]);
            for j in 0..n {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[j] += h;
                xm[j] -= h;
                f(s, u, &xp, &mut a);
                f(s, u, &xm, &mut b);
                fx(s, u, &xp, &mut ja);
                fx(s, u, &xm, &mut jb);
                for i in 0..n {
                    fd_j[i * n + j] = (a[i] - b[i]) / (2.0 * h);
                    for l in 0..n {
                        fd_h[i * n * n + l * n + j] = (ja[i * n + l] - jb[i * n + l]) / (2.0 * h);
                    }
                }
            }
            fd_compare(if name == "b" { "b_x" } else { "sigma_x" }, &jac, &fd_j)?;
            fd_compare(if name == "b" { "b_xx" } else { "sigma_xx" }, &hess, &fd_h)?;
        }

        // f: gradient, Hessian and t-derivatives
        let mut args = x.clone();
        args.push(y);
        args.push(z);
        let fval = |t: f64, a: &[f64]| problem.running_cost(t, s, u, &a[..n], a[n], a[n + 1]);
        let fgrad = |t: f64, a: &[f64], o: &mut [f64]| {
            problem.running_cost_grad(t, s, u, &a[..n], a[n], a[n + 1], o)
        };
        let mut g = vec![0.0; k];
        let mut hs = vec![0.0; k * k];
        fgrad(t, &args, &mut g);
        problem.running_cost_hess(t, s, u, &x, y, z, &mut hs);
        let mut fd_g = vec![0.0; k];
        let mut fd_hs = vec![0.0; k * k];
        let (mut ga, mut gb) = (vec![0.0; k], vec![0.0; k]);
        for j in 0..k {
            let mut ap = args.clone();
            let mut am = args.clone();
            ap[j] += h;
            am[j] -= h;
            fd_g[j] = (fval(t, &ap) - fval(t, &am)) / (2.0 * h);
            fgrad(t, &ap, &mut ga);
            fgrad(t, &am, &mut gb);
            for i in 0..k {
                fd_hs[i * k + j] = (ga[i] - gb[i]) / (2.0 * h);
            }
        }
        fd_compare("f gradient", &g, &fd_g)?;
        fd_compare("f hessian", &hs, &fd_hs)?;
        let ft = problem.running_cost_dt(t, s, u, &x, y, z);
        fd_compare(
            "f_t",
            &[ft],
            &[(fval(t + h, &args) - fval(t - h, &args)) / (2.0 * h)],
        )?;
        let mut gt = vec![0.0; k];
        problem.running_cost_grad_dt(t, s, u, &x, y, z, &mut gt);
        fgrad(t + h, &args, &mut ga);
        fgrad(t - h, &args, &mut gb);
        let fd_gt: Vec<f64> = ga
            .iter()
            .zip(&gb)
            .map(|(a, b)| (a - b) / (2.0 * h))
            .collect();
        fd_compare("f gradient t-derivative", &gt, &fd_gt)?;

        // h
        let mut hx = vec![0.0; n];
        let mut hxx = vec![0.0; n * n];
        problem.terminal_cost_x(t, &x, &mut hx);
        problem.terminal_cost_xx(t, &x, &mut hxx);
        let mut fd_hx = vec![0.0; n];
        let mut fd_hxx = vec![0.0; n * n];
        let (mut ha, mut hb) = (vec![0.0; n], vec![0.0; n]);
        for j in 0..n {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            fd_hx[j] = (problem.terminal_cost(t, &xp) - problem.terminal_cost(t, &xm)) / (2.0 * h);
            problem.terminal_cost_x(t, &xp, &mut ha);
            problem.terminal_cost_x(t, &xm, &mut hb);
            for i in 0..n {
                fd_hxx[i * n + j] = (ha[i] - hb[i]) / (2.0 * h);
            }
        }
        fd_compare("h_x", &hx, &fd_hx)?;
        fd_compare("h_xx", &hxx, &fd_hxx)?;
        let ht = problem.terminal_cost_dt(t, &x);
        fd_compare(
            "h_t",
            &[ht],
            &[(problem.terminal_cost(t + h, &x) - problem.terminal_cost(t - h, &x)) / (2.0 * h)],
        )?;
        let mut hxt = vec![0.0; n];
        problem.terminal_cost_x_dt(t, &x, &mut hxt);
        problem.terminal_cost_x(t + h, &x, &mut ha);
        problem.terminal_cost_x(t - h, &x, &mut hb);
        let fd_hxt: Vec<f64> = ha
            .iter()
            .zip(&hb)
            .map(|(a, b)| (a - b) / (2.0 * h))
            .collect();
        fd_compare("h_x t-derivative", &hxt, &fd_hxt)?;
    }
    Ok(())
}
