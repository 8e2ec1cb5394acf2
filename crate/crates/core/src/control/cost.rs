//! The recursive cost as a Type-I BSVIE, with its `t`-derivative and `Diag[Ẑ]`.

use super::{ControlOptions, ControlPolicy, ControlProblem};
use smallvec::{smallvec, SmallVec};

type Buf = SmallVec<[f64; 16]>;
use crate::bsde::{Cell, RegressionPlan};
use crate::ebsvie::{
    compute_diag, solve_derivative_with_plan, solve_with_plan, spot_check_y_independence,
    EbsvieDerivatives, EbsvieSpec, SolveOptions, SolveReport,
};
use crate::error::{Error, Result};
use crate::fields::{AdaptedField, BiTemporalField, Paired};
use crate::grid::{PathEnsemble, PathSet};

/// Cost process `Ŷ`, `Ẑ`, `∂tẐ` and `Diag[Ẑ]` on both path sets.
#[derive(Clone, Debug)]
pub struct CostSolution {
    pub y_hat: Paired<AdaptedField>,
    pub z_hat: Paired<BiTemporalField>,
    pub dz_hat: Paired<BiTemporalField>,
    pub diag_z: Paired<AdaptedField>,
    pub report: SolveReport,
    /// Relative RMS gap between `∂tẐ` and a finite difference of `Ẑ` in `t`.
    pub dz_fd_discrepancy: f64,
}

pub(crate) struct CostSpec<'a> {
    pub problem: &'a dyn ControlProblem,
    pub policy: &'a ControlPolicy,
    pub x: &'a Paired<AdaptedField>,
}

impl CostSpec<'_> {
    fn u(&self, c: &Cell) -> f64 {
        self.problem.control_set()[self.policy.index(c.role, c.path, c.s_idx)]
    }

    fn x_at(&self, c: &Cell, node: usize) -> &[f64] {
        self.x.get(c.role).at(c.path, node)
    }

    fn x_end(&self, c: &Cell) -> &[f64] {
        let f = self.x.get(c.role);
        f.at(c.path, f.n_nodes() - 1)
    }
}

impl EbsvieSpec for CostSpec<'_> {
    fn dims(&self) -> (usize, usize) {
        (1, 1)
    }

    fn lipschitz(&self) -> f64 {
        self.problem.lipschitz()
    }

    fn independent_of_y(&self) -> bool {
        true
    }

    fn free_term(&self, c: &Cell, _: &PathSet, out: &mut [f64]) {
        out[0] = self.problem.terminal_cost(c.t, self.x_end(c));
    }

    fn generator(&self, c: &Cell, eta: &[f64], _: &[f64], z: &[f64], _: &PathSet, out: &mut [f64]) {
        out[0] =
            self.problem
                .running_cost(c.t, c.s, self.u(c), self.x_at(c, c.s_idx), eta[0], z[0]);
    }

    fn derivatives(&self) -> Option<&dyn EbsvieDerivatives> {
        Some(self)
    }
}

impl EbsvieDerivatives for CostSpec<'_> {
    fn free_term_dt(&self, c: &Cell, _: &PathSet, out: &mut [f64]) {
        out[0] = self.problem.terminal_cost_dt(c.t, self.x_end(c));
    }

    fn generator_dt(
        &self,
        c: &Cell,
        eta: &[f64],
        _: &[f64],
        z: &[f64],
        _: &PathSet,
        out: &mut [f64],
    ) {
        out[0] =
            self.problem
                .running_cost_dt(c.t, c.s, self.u(c), self.x_at(c, c.s_idx), eta[0], z[0]);
    }

    fn generator_dy(
        &self,
        _: &Cell,
        _: &[f64],
        _: &[f64],
        _: &[f64],
        _: &PathSet,
        out: &mut [f64],
    ) {
        out[0] = 0.0;
    }

    fn generator_dz(
        &self,
        c: &Cell,
        eta: &[f64],
        _: &[f64],
        z: &[f64],
        _: &PathSet,
        out: &mut [f64],
    ) {
        let n = self.problem.state_dim();
        let mut g: Buf = smallvec![0.0; n + 2];
        self.problem.running_cost_grad(
            c.t,
            c.s,
            self.u(c),
            self.x_at(c, c.s_idx),
            eta[0],
            z[0],
            &mut g,
        );
        out[0] = g[n + 1];
    }
}

pub(crate) fn with_regression(opts: &SolveOptions) -> SolveOptions {
    SolveOptions {
        keep_regression: true,
        ..opts.clone()
    }
}

/// Relative RMS gap between `dz` and the centred difference quotient of `z` in `t`.
pub(crate) fn fd_t_discrepancy(z: &BiTemporalField, dz: &BiTemporalField) -> f64 {
    let nn = z.n_nodes();
    let dt = z.grid().dt();
    let (mut num, mut den) = (0.0, 0.0);
    for t in 0..nn - 1 {
        for p in 0..z.n_paths() {
            for s in 0..nn {
                for ((a, b), (da, db)) in z
                    .at(t, p, s)
                    .iter()
                    .zip(z.at(t + 1, p, s))
                    .zip(dz.at(t, p, s).iter().zip(dz.at(t + 1, p, s)))
                {
                    let mid = 0.5 * (da + db);
                    num += ((b - a) / dt - mid).powi(2);
                    den += mid * mid;
                }
            }
        }
    }
    let cells = ((nn - 1) * z.n_paths() * nn * z.dim()).max(1) as f64;
    (num / cells).sqrt() / (1.0 + (den / cells).sqrt())
}

/// Solves the cost BSVIE under `policy` along the state `x`.
pub fn solve_cost_bsvie(
    problem: &dyn ControlProblem,
    policy: &ControlPolicy,
    x: &Paired<AdaptedField>,
    ens: &PathEnsemble,
    plan: &RegressionPlan,
    opts: &ControlOptions,
) -> Result<CostSolution> {
    if x.primary.n_paths() != ens.n_paths() || x.primary.n_nodes() != ens.grid().n_nodes() {
        return Err(Error::ShapeMismatch(
            "state does not match the ensemble".into(),
        ));
    }
    policy.validate(problem.control_set().len(), ens)?;
    let spec = CostSpec { problem, policy, x };
    spot_check_y_independence(&spec, ens)?;
    let so = with_regression(&opts.solve);
    let sol = solve_with_plan(&spec, ens, plan, &so)?;
    let der = solve_derivative_with_plan(&spec, ens, plan, &sol, &so)?;
    let reg = sol.regression.clone().expect("regression side requested");
    let (_, dz_reg) = der.regression.expect("regression side requested");
    let dz_fd_discrepancy = fd_t_discrepancy(&sol.z, &der.dz);
    let diag_z = Paired::new(
        compute_diag(&sol.z, &der.dz)?,
        compute_diag(&reg.z, &dz_reg)?,
    );
    Ok(CostSolution {
        y_hat: Paired::new(sol.eta, reg.eta),
        z_hat: Paired::new(sol.z, reg.z),
        dz_hat: Paired::new(der.dz, dz_reg),
        diag_z,
        report: sol.report,
        dz_fd_discrepancy,
    })
}
