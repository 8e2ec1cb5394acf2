//! First- and second-order adjoint EBSVIEs along an incumbent trajectory.

use smallvec::{smallvec, SmallVec};

use super::cost::{fd_t_discrepancy, with_regression, CostSolution};
use super::{ControlOptions, ControlPolicy, ControlProblem};
use crate::bsde::{Cell, RegressionPlan};
use crate::ebsvie::{
    compute_diag, solve_derivative_with_plan, solve_with_plan, EbsvieDerivatives, EbsvieSolution,
    EbsvieSpec, SolveReport,
};
use crate::error::Result;
use crate::fields::{AdaptedField, BiTemporalField, Paired};
use crate::grid::{PathEnsemble, PathRole, PathSet};

type Buf = SmallVec<[f64; 4]>;
type Mat = SmallVec<[f64; 9]>;

/// `(p, q)`, `Diag[q]` and `(P, Q)` on both path sets. `P` and `Q` are
/// stored row-major with `n²` components.
#[derive(Clone, Debug)]
pub struct Adjoints {
    pub p: Paired<BiTemporalField>,
    pub q: Paired<BiTemporalField>,
    pub dq: Paired<BiTemporalField>,
    pub diag_q: Paired<AdaptedField>,
    pub p_diag: Paired<AdaptedField>,
    pub big_p: Paired<BiTemporalField>,
    pub big_q: Paired<BiTemporalField>,
    pub first_report: SolveReport,
    pub second_report: SolveReport,
    pub dq_fd_discrepancy: f64,
}

/// Coefficients frozen along `(û, X̂, Ŷ, Ẑ)` at one cell.
struct Frozen<'a> {
    bx: &'a [f64],
    sx: &'a [f64],
    grad: Buf,
}

struct Along<'a> {
    problem: &'a dyn ControlProblem,
    policy: &'a ControlPolicy,
    x: &'a Paired<AdaptedField>,
    cost: &'a CostSolution,
    /// `(b_x, σ_x, b_xx, σ_xx)` per path and node, which do not depend on `t`.
    coef: Paired<Vec<f64>>,
}

impl<'a> Along<'a> {
    fn new(
        problem: &'a dyn ControlProblem,
        policy: &'a ControlPolicy,
        x: &'a Paired<AdaptedField>,
        cost: &'a CostSolution,
    ) -> Self {
        let n = problem.state_dim();
        let w = 2 * n * n + 2 * n * n * n;
        let us = problem.control_set();
        let table = |role: PathRole| {
            let f = x.get(role);
            let nn = f.n_nodes();
            let grid = f.grid();
            let mut v = vec![0.0; f.n_paths() * nn * w];
            for (cell, out) in v.chunks_mut(w).enumerate() {
                let (p, j) = (cell / nn, cell % nn);
                let (u, xv, s) = (us[policy.index(role, p, j)], f.at(p, j), grid.node(j));
                let (bx, rest) = out.split_at_mut(n * n);
                let (sx, rest) = rest.split_at_mut(n * n);
                let (bxx, sxx) = rest.split_at_mut(n * n * n);
                problem.drift_x(s, u, xv, bx);
                problem.diffusion_x(s, u, xv, sx);
                problem.drift_xx(s, u, xv, bxx);
                problem.diffusion_xx(s, u, xv, sxx);
            }
            v
        };
        Self {
            problem,
            policy,
            x,
            cost,
            coef: Paired::new(table(PathRole::Primary), table(PathRole::Regression)),
        }
    }

    fn n(&self) -> usize {
        self.problem.state_dim()
    }

    fn u(&self, c: &Cell) -> f64 {
        self.problem.control_set()[self.policy.index(c.role, c.path, c.s_idx)]
    }

    fn x(&self, c: &Cell) -> &[f64] {
        self.x.get(c.role).at(c.path, c.s_idx)
    }

    fn x_end(&self, c: &Cell) -> &[f64] {
        let f = self.x.get(c.role);
        f.at(c.path, f.n_nodes() - 1)
    }

    fn yz(&self, c: &Cell) -> (f64, f64) {
        (
            self.cost.y_hat.get(c.role).get(c.path, c.s_idx, 0),
            self.cost.z_hat.get(c.role).get(c.t_idx, c.path, c.s_idx, 0),
        )
    }

    /// `(b_x, σ_x, b_xx, σ_xx)` at the cell.
    fn coefs(&self, c: &Cell) -> (&[f64], &[f64], &[f64], &[f64]) {
        let n = self.n();
        let w = 2 * n * n + 2 * n * n * n;
        let nn = self.x.primary.n_nodes();
        let o = (c.path * nn + c.s_idx) * w;
        let all = &self.coef.get(c.role)[o..o + w];
        let (bx, rest) = all.split_at(n * n);
        let (sx, rest) = rest.split_at(n * n);
        let (bxx, sxx) = rest.split_at(n * n * n);
        (bx, sx, bxx, sxx)
    }

    fn frozen(&self, c: &Cell) -> Frozen<'_> {
        let n = self.n();
        let (y, z) = self.yz(c);
        let (bx, sx, _, _) = self.coefs(c);
        let mut grad: Buf = smallvec![0.0; n + 2];
        self.problem
            .running_cost_grad(c.t, c.s, self.u(c), self.x(c), y, z, &mut grad);
        Frozen { bx, sx, grad }
    }

    fn hess(&self, c: &Cell) -> Mat {
        let n = self.n();
        let (y, z) = self.yz(c);
        let mut h: Mat = smallvec![0.0; (n + 2) * (n + 2)];
        self.problem
            .running_cost_hess(c.t, c.s, self.u(c), self.x(c), y, z, &mut h);
        h
    }
}

/// `Aᵀv` for row-major `n × n` `A`.
fn tmul(a: &[f64], v: &[f64], n: usize, out: &mut [f64]) {
    for i in 0..n {
        out[i] = (0..n).map(|j| a[j * n + i] * v[j]).sum();
    }
}

struct FirstOrder<'a>(Along<'a>);

impl EbsvieSpec for FirstOrder<'_> {
    fn dims(&self) -> (usize, usize) {
        (self.0.n(), 1)
    }

    fn lipschitz(&self) -> f64 {
        self.0.problem.lipschitz()
    }

    fn free_term(&self, c: &Cell, _: &PathSet, out: &mut [f64]) {
        self.0.problem.terminal_cost_x(c.t, self.0.x_end(c), out);
    }

    fn generator(&self, c: &Cell, eta: &[f64], p: &[f64], q: &[f64], _: &PathSet, out: &mut [f64]) {
        let n = self.0.n();
        let fr = self.0.frozen(c);
        let (fy, fz) = (fr.grad[n], fr.grad[n + 1]);
        let mut btp: Buf = smallvec![0.0; n];
        let mut stp: Buf = smallvec![0.0; n];
        let mut stq: Buf = smallvec![0.0; n];
        tmul(fr.bx, p, n, &mut btp);
        tmul(fr.sx, p, n, &mut stp);
        tmul(fr.sx, q, n, &mut stq);
        for i in 0..n {
            out[i] = btp[i] + stq[i] + fz * (stp[i] + q[i]) + fy * eta[i] + fr.grad[i];
        }
    }

    fn derivatives(&self) -> Option<&dyn EbsvieDerivatives> {
        Some(self)
    }
}

impl EbsvieDerivatives for FirstOrder<'_> {
    fn free_term_dt(&self, c: &Cell, _: &PathSet, out: &mut [f64]) {
        self.0.problem.terminal_cost_x_dt(c.t, self.0.x_end(c), out);
    }

    fn generator_dt(
        &self,
        c: &Cell,
        eta: &[f64],
        p: &[f64],
        q: &[f64],
        _: &PathSet,
        out: &mut [f64],
    ) {
        let a = &self.0;
        let n = a.n();
        let k = n + 2;
        let fr = a.frozen(c);
        let (y, z) = a.yz(c);
        let mut gt: Buf = smallvec![0.0; k];
        a.problem
            .running_cost_grad_dt(c.t, c.s, a.u(c), a.x(c), y, z, &mut gt);
        let h = a.hess(c);
        let dzh = a.cost.dz_hat.get(c.role).get(c.t_idx, c.path, c.s_idx, 0);
        // d/dt of f_α(t, r) including the dependence through Ẑ(t, r)
        let dgrad: Buf = (0..k).map(|i| gt[i] + h[i * k + n + 1] * dzh).collect();
        let mut stp: Buf = smallvec![0.0; n];
        tmul(fr.sx, p, n, &mut stp);
        for i in 0..n {
            out[i] = dgrad[n + 1] * (stp[i] + q[i]) + dgrad[n] * eta[i] + dgrad[i];
        }
    }

    fn generator_dy(
        &self,
        c: &Cell,
        _: &[f64],
        _: &[f64],
        _: &[f64],
        _: &PathSet,
        out: &mut [f64],
    ) {
        let n = self.0.n();
        let fr = self.0.frozen(c);
        let fz = fr.grad[n + 1];
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = fr.bx[j * n + i] + fz * fr.sx[j * n + i];
            }
        }
    }

    fn generator_dz(
        &self,
        c: &Cell,
        _: &[f64],
        _: &[f64],
        _: &[f64],
        _: &PathSet,
        out: &mut [f64],
    ) {
        let n = self.0.n();
        let fr = self.0.frozen(c);
        let fz = fr.grad[n + 1];
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = fr.sx[j * n + i] + if i == j { fz } else { 0.0 };
            }
        }
    }
}

struct SecondOrder<'a> {
    along: Along<'a>,
    p: &'a Paired<BiTemporalField>,
    q: &'a Paired<BiTemporalField>,
    p_diag: &'a Paired<AdaptedField>,
}

impl EbsvieSpec for SecondOrder<'_> {
    fn dims(&self) -> (usize, usize) {
        let n = self.along.n();
        (n * n, 1)
    }

    fn lipschitz(&self) -> f64 {
        self.along.problem.lipschitz()
    }

    fn free_term(&self, c: &Cell, _: &PathSet, out: &mut [f64]) {
        self.along
            .problem
            .terminal_cost_xx(c.t, self.along.x_end(c), out);
    }

    fn generator(
        &self,
        c: &Cell,
        eta: &[f64],
        pm: &[f64],
        qm: &[f64],
        _: &PathSet,
        out: &mut [f64],
    ) {
        let a = &self.along;
        let n = a.n();
        let k = n + 2;
        let fr = a.frozen(c);
        let (fy, fz) = (fr.grad[n], fr.grad[n + 1]);
        let (bx, sx, bxx, sxx) = a.coefs(c);
        let p = self.p.get(c.role).at(c.t_idx, c.path, c.s_idx);
        let q = self.q.get(c.role).at(c.t_idx, c.path, c.s_idx);
        let prr = self.p_diag.get(c.role).at(c.path, c.s_idx);
        let h = a.hess(c);
        let mut w: Buf = smallvec![0.0; n];
        tmul(sx, p, n, &mut w);
        for i in 0..n {
            w[i] += q[i];
        }
        // M = [I, p(r,r), σ_xᵀp + q], n × (n + 2)
        let mcol = |r: usize, col: usize| -> f64 {
            if col < n {
                if r == col {
                    1.0
                } else {
                    0.0
                }
            } else if col == n {
                prr[r]
            } else {
                w[r]
            }
        };
        let mm = |i: usize, j: usize, m: &[f64]| m[i * n + j];
        for r in 0..n {
            for s in 0..n {
                let mut v = 0.0;
                for l in 0..n {
                    v += bx[l * n + r] * mm(l, s, pm) + mm(r, l, pm) * bx[l * n + s];
                    v += sx[l * n + r] * mm(l, s, qm) + mm(r, l, qm) * sx[l * n + s];
                    let mut sps = 0.0;
                    for o in 0..n {
                        sps += mm(l, o, pm) * sx[o * n + s];
                    }
                    v += sx[l * n + r] * sps;
                    v += fz * (sx[l * n + r] * mm(l, s, pm) + mm(r, l, pm) * sx[l * n + s]);
                    v += p[l] * bxx[l * n * n + r * n + s];
                    v += (fz * p[l] + q[l]) * sxx[l * n * n + r * n + s];
                }
                v += fz * mm(r, s, qm) + fy * eta[r * n + s];
                for i in 0..k {
                    let mri = mcol(r, i);
                    if mri == 0.0 {
                        continue;
                    }
                    for j in 0..k {
                        v += mri * h[i * k + j] * mcol(s, j);
                    }
                }
                out[r * n + s] = v;
            }
        }
    }
}

fn paired(
    sol: EbsvieSolution,
) -> (
    Paired<BiTemporalField>,
    Paired<BiTemporalField>,
    Paired<AdaptedField>,
    SolveReport,
) {
    let reg = sol.regression.expect("regression side requested");
    (
        Paired::new(sol.y, reg.y),
        Paired::new(sol.z, reg.z),
        Paired::new(sol.eta, reg.eta),
        sol.report,
    )
}

/// Solves both adjoint equations along `(û, X̂)` and the cost solution.
pub fn solve_adjoints(
    problem: &dyn ControlProblem,
    policy: &ControlPolicy,
    x: &Paired<AdaptedField>,
    cost: &CostSolution,
    ens: &PathEnsemble,
    plan: &RegressionPlan,
    opts: &ControlOptions,
) -> Result<Adjoints> {
    let so = with_regression(&opts.solve);
    let first = FirstOrder(Along::new(problem, policy, x, cost));
    let sol = solve_with_plan(&first, ens, plan, &so)?;
    let der = solve_derivative_with_plan(&first, ens, plan, &sol, &so)?;
    let (p, q, p_diag, first_report) = paired(sol);
    let (_, dq_reg) = der.regression.expect("regression side requested");
    let dq = Paired::new(der.dz, dq_reg);
    let dq_fd_discrepancy = fd_t_discrepancy(&q.primary, &dq.primary);
    let diag_q = Paired::new(
        compute_diag(&q.primary, &dq.primary)?,
        compute_diag(&q.regression, &dq.regression)?,
    );

    let second = SecondOrder {
        along: first.0,
        p: &p,
        q: &q,
        p_diag: &p_diag,
    };
    let sol2 = solve_with_plan(&second, ens, plan, &so)?;
    let (big_p, big_q, _, second_report) = paired(sol2);
    Ok(Adjoints {
        p,
        q,
        dq,
        diag_q,
        p_diag,
        big_p,
        big_q,
        first_report,
        second_report,
        dq_fd_discrepancy,
    })
}
