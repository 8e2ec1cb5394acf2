//! Extended backward stochastic Volterra integral equations
//!
//! ```text
//! Y(t,s) = ψ(t) + ∫_s^T g(t, r, Y(r,r), Y(t,r), Z(t,r)) dr - ∫_s^T Z(t,r) dW(r),
//! ```
//!
//! solved for `(t, s)` on the whole square of grid nodes by Picard iteration
//! on the diagonal: freeze `η(r) = Y(r,r)` from the previous iterate, solve
//! one BSDE per t-node (in parallel), and stop once the β-norm of the change
//! falls below the tolerance.

mod derivative;
mod diag;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub(crate) use derivative::solve_derivative_with_plan;
pub use derivative::{solve_derivative_ebsvie, DerivativeSolution};
pub use diag::{
    compute_diag, property_d_rate, property_d_rate_source, GapSource, GridGap, PropertyDReport,
    PropertyDRow,
};

use crate::bsde::slice::{solve_slice, SliceOut, SliceProblem};
use crate::bsde::{
    check_dims, sq_dist, Cell, RegressionBasis, RegressionPlan, SchemeParams, StabilityProbe,
};
use crate::error::{check_budget, Error, Result, DEFAULT_MEMORY_BUDGET};
use crate::fields::{
    combine_norm_terms, slice_norm_terms, AdaptedField, BetaNorm, BiTemporalField, Paired, RawShape,
};
use crate::grid::{PathEnsemble, PathRole, PathSet};

/// Coefficients `(ψ, g)` of an EBSVIE with values in `R^m` and `d` Brownian
/// coordinates. `z` slices are `m × d` row-major.
pub trait EbsvieSpec: Sync {
    /// `(m, d)`.
    fn dims(&self) -> (usize, usize);

    fn lipschitz(&self) -> f64 {
        1.0
    }

    /// Declares that the generator ignores its `y` argument.
    fn independent_of_y(&self) -> bool {
        false
    }

    /// `ψ(t)` at `cell.t`, evaluated on the path `cell.path`.
    fn free_term(&self, cell: &Cell, paths: &PathSet, out: &mut [f64]);

    /// `g(t, s, η, y, z)` at `(cell.t, cell.s)`.
    fn generator(
        &self,
        cell: &Cell,
        eta: &[f64],
        y: &[f64],
        z: &[f64],
        paths: &PathSet,
        out: &mut [f64],
    );

    fn derivatives(&self) -> Option<&dyn EbsvieDerivatives> {
        None
    }
}

/// Derivative callbacks used by the equation for `(∂tY, ∂tZ)`.
pub trait EbsvieDerivatives: Sync {
    fn free_term_dt(&self, cell: &Cell, paths: &PathSet, out: &mut [f64]);

    /// `∂t g`, length `m`.
    fn generator_dt(
        &self,
        cell: &Cell,
        eta: &[f64],
        y: &[f64],
        z: &[f64],
        paths: &PathSet,
        out: &mut [f64],
    );

    /// `∂g_i/∂y_j` at `out[i * m + j]`.
    fn generator_dy(
        &self,
        cell: &Cell,
        eta: &[f64],
        y: &[f64],
        z: &[f64],
        paths: &PathSet,
        out: &mut [f64],
    );

    /// `∂g_i/∂z_{jk}` at `out[i * m * d + j * d + k]`.
    fn generator_dz(
        &self,
        cell: &Cell,
        eta: &[f64],
        y: &[f64],
        z: &[f64],
        paths: &PathSet,
        out: &mut [f64],
    );
}

type FreeFn = dyn Fn(&Cell, &PathSet, &mut [f64]) + Send + Sync;
type GenFn = dyn Fn(&Cell, &[f64], &[f64], &[f64], &PathSet, &mut [f64]) + Send + Sync;

#[derive(Clone)]
struct FnDerivatives {
    free_dt: Arc<FreeFn>,
    gen_dt: Arc<GenFn>,
    gen_dy: Arc<GenFn>,
    gen_dz: Arc<GenFn>,
}

/// An [`EbsvieSpec`] assembled from closures.
#[derive(Clone)]
pub struct FnEbsvie {
    pub m: usize,
    pub d: usize,
    pub lipschitz: f64,
    pub independent_of_y: bool,
    free: Arc<FreeFn>,
    gen: Arc<GenFn>,
    derivs: Option<FnDerivatives>,
}

impl FnEbsvie {
    pub fn new(
        m: usize,
        d: usize,
        free_term: impl Fn(&Cell, &PathSet, &mut [f64]) + Send + Sync + 'static,
        generator: impl Fn(&Cell, &[f64], &[f64], &[f64], &PathSet, &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        Self {
            m,
            d,
            lipschitz: 1.0,
            independent_of_y: false,
            free: Arc::new(free_term),
            gen: Arc::new(generator),
            derivs: None,
        }
    }

    pub fn with_lipschitz(mut self, l: f64) -> Self {
        self.lipschitz = l;
        self
    }

    pub fn independent_of_y(mut self) -> Self {
        self.independent_of_y = true;
        self
    }

    pub fn with_derivatives(
        mut self,
        free_term_dt: impl Fn(&Cell, &PathSet, &mut [f64]) + Send + Sync + 'static,
        generator_dt: impl Fn(&Cell, &[f64], &[f64], &[f64], &PathSet, &mut [f64])
            + Send
            + Sync
            + 'static,
        generator_dy: impl Fn(&Cell, &[f64], &[f64], &[f64], &PathSet, &mut [f64])
            + Send
            + Sync
            + 'static,
        generator_dz: impl Fn(&Cell, &[f64], &[f64], &[f64], &PathSet, &mut [f64])
            + Send
            + Sync
            + 'static,
    ) -> Self {
        self.derivs = Some(FnDerivatives {
            free_dt: Arc::new(free_term_dt),
            gen_dt: Arc::new(generator_dt),
            gen_dy: Arc::new(generator_dy),
            gen_dz: Arc::new(generator_dz),
        });
        self
    }
}

impl EbsvieSpec for FnEbsvie {
    fn dims(&self) -> (usize, usize) {
        (self.m, self.d)
    }

    fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    fn independent_of_y(&self) -> bool {
        self.independent_of_y
    }

    fn free_term(&self, cell: &Cell, paths: &PathSet, out: &mut [f64]) {
        (self.free)(cell, paths, out)
    }

    fn generator(
        &self,
        cell: &Cell,
        eta: &[f64],
        y: &[f64],
        z: &[f64],
        paths: &PathSet,
        out: &mut [f64],
    ) {
        (self.gen)(cell, eta, y, z, paths, out)
    }

    fn derivatives(&self) -> Option<&dyn EbsvieDerivatives> {
        self.derivs.as_ref().map(|_| self as &dyn EbsvieDerivatives)
    }
}

impl EbsvieDerivatives for FnEbsvie {
    fn free_term_dt(&self, cell: &Cell, paths: &PathSet, out: &mut [f64]) {
        (self.derivs.as_ref().expect("derivatives").free_dt)(cell, paths, out)
    }

    fn generator_dt(
        &self,
        cell: &Cell,
        eta: &[f64],
        y: &[f64],
        z: &[f64],
        paths: &PathSet,
        out: &mut [f64],
    ) {
        (self.derivs.as_ref().expect("derivatives").gen_dt)(cell, eta, y, z, paths, out)
    }

    fn generator_dy(
        &self,
        cell: &Cell,
        eta: &[f64],
        y: &[f64],
        z: &[f64],
        paths: &PathSet,
        out: &mut [f64],
    ) {
        (self.derivs.as_ref().expect("derivatives").gen_dy)(cell, eta, y, z, paths, out)
    }

    fn generator_dz(
        &self,
        cell: &Cell,
        eta: &[f64],
        y: &[f64],
        z: &[f64],
        paths: &PathSet,
        out: &mut [f64],
    ) {
        (self.derivs.as_ref().expect("derivatives").gen_dz)(cell, eta, y, z, paths, out)
    }
}

/// Solver settings shared by the EBSVIE family.
#[derive(Clone, Debug)]
pub struct SolveOptions {
    pub basis: RegressionBasis,
    pub scheme: SchemeParams,
    /// Weight of the β-norm; `None` selects `max(1, 4·Ĉ·L)` from a pilot probe.
    pub beta: Option<f64>,
    /// Moment exponent of the β-norm.
    pub p: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Also return the fields computed on the regression path set.
    pub keep_regression: bool,
    pub memory_budget: u128,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            basis: RegressionBasis::default(),
            scheme: SchemeParams::default(),
            beta: None,
            p: 2.0,
            tol: 1e-8,
            max_iter: 50,
            keep_regression: false,
            memory_budget: DEFAULT_MEMORY_BUDGET,
        }
    }
}

impl SolveOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "tol must be positive, got {}",
                self.tol
            )));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidArgument("max_iter must be at least 1".into()));
        }
        if let Some(b) = self.beta {
            BetaNorm::new(b, self.p)?;
        } else {
            BetaNorm::new(0.0, self.p)?;
        }
        self.scheme.validate()
    }
}

/// Convergence history of a Picard solve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub picard_iterations: usize,
    pub beta_used: f64,
    /// `β` was reduced to keep `e^{βT}` finite.
    pub beta_capped: bool,
    /// Pilot stability constant, when `β` came from the heuristic.
    pub stability_constant: Option<f64>,
    /// `deltas[k] / deltas[k-1]`; length `picard_iterations - 1`.
    pub contraction_ratios: Vec<f64>,
    /// β-norm of each iterate change, the first against `y⁰ = 0`.
    pub deltas: Vec<f64>,
    pub converged: bool,
    pub final_delta: f64,
    pub ridge_nodes: Vec<usize>,
}

/// Fields computed on the regression path set.
#[derive(Clone, Debug)]
pub struct RegressionSide {
    pub y: BiTemporalField,
    pub z: BiTemporalField,
    pub eta: AdaptedField,
}

/// Solution of an EBSVIE on the primary path set.
#[derive(Clone, Debug)]
pub struct EbsvieSolution {
    pub y: BiTemporalField,
    /// `m · d` components per cell.
    pub z: BiTemporalField,
    /// `η(t) = Y(t,t)`.
    pub eta: AdaptedField,
    pub report: SolveReport,
    pub regression: Option<RegressionSide>,
    /// The diagonal frozen during the last Picard sweep, `[path][node][m]`.
    pub(crate) frozen_eta: Paired<Vec<f64>>,
}

/// One t-slice of the Picard map.
pub(crate) struct Slice<'a> {
    pub spec: &'a dyn EbsvieSpec,
    pub t_idx: usize,
    pub nodes: &'a [f64],
    pub eta: &'a Paired<Vec<f64>>,
    pub m: usize,
}

impl Slice<'_> {
    pub(crate) fn cell(&self, role: PathRole, s_idx: usize, path: usize) -> Cell {
        Cell {
            t_idx: self.t_idx,
            t: self.nodes[self.t_idx],
            s_idx,
            s: self.nodes[s_idx],
            path,
            role,
        }
    }

    pub(crate) fn eta_at(&self, role: PathRole, path: usize, s_idx: usize) -> &[f64] {
        let nn = self.nodes.len();
        let o = (path * nn + s_idx) * self.m;
        &self.eta.get(role)[o..o + self.m]
    }
}

impl SliceProblem for Slice<'_> {
    fn m(&self) -> usize {
        self.m
    }

    fn terminal(&self, role: PathRole, path: usize, paths: &PathSet, out: &mut [f64]) {
        let c = self.cell(role, self.nodes.len() - 1, path);
        self.spec.free_term(&c, paths, out)
    }

    fn generator(
        &self,
        role: PathRole,
        s_idx: usize,
        path: usize,
        y: &[f64],
        z: &[f64],
        paths: &PathSet,
        out: &mut [f64],
    ) {
        let c = self.cell(role, s_idx, path);
        self.spec
            .generator(&c, self.eta_at(role, path, s_idx), y, z, paths, out)
    }
}

/// Terminal shifted by one in every component.
struct Shifted<'a>(&'a Slice<'a>);

impl SliceProblem for Shifted<'_> {
    fn m(&self) -> usize {
        self.0.m
    }

    fn terminal(&self, role: PathRole, path: usize, paths: &PathSet, out: &mut [f64]) {
        self.0.terminal(role, path, paths, out);
        out.iter_mut().for_each(|v| *v += 1.0);
    }

    fn generator(
        &self,
        role: PathRole,
        s_idx: usize,
        path: usize,
        y: &[f64],
        z: &[f64],
        paths: &PathSet,
        out: &mut [f64],
    ) {
        self.0.generator(role, s_idx, path, y, z, paths, out)
    }
}

pub(crate) fn tag_t(e: Error, t_idx: usize) -> Error {
    match e {
        Error::NonFinite {
            stage,
            s_node,
            path,
            ..
        } => Error::NonFinite {
            stage,
            t_node: Some(t_idx),
            s_node,
            path,
        },
        other => other,
    }
}

/// Diagonal `Y(t_j, t_j)` of a family of slices, `[path][node][m]`.
fn diagonal_of(slices: &[&[f64]], mp: usize, nn: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; mp * nn * m];
    for (j, sl) in slices.iter().enumerate() {
        for p in 0..mp {
            let o = (p * nn + j) * m;
            out[o..o + m].copy_from_slice(&sl[o..o + m]);
        }
    }
    out
}

/// Measured BSDE stability constant on the t = S slice with η ≡ 0:
/// response of the regression-set solution to a unit terminal shift.
fn pilot_constant(
    spec: &dyn EbsvieSpec,
    ens: &PathEnsemble,
    plan: &RegressionPlan,
    scheme: &SchemeParams,
) -> Result<f64> {
    let (m, _) = spec.dims();
    let nn = ens.grid().n_nodes();
    let mp = ens.n_paths();
    let zero = Paired::new(vec![0.0; mp * nn * m], vec![0.0; mp * nn * m]);
    let base = Slice {
        spec,
        t_idx: 0,
        nodes: ens.grid().nodes(),
        eta: &zero,
        m,
    };
    let a = solve_slice(&base, ens, plan, scheme)?;
    let b = solve_slice(&Shifted(&base), ens, plan, scheme)?;
    let md = m * ens.dim();
    let dt = ens.grid().dt();
    let mut num = 0.0;
    for p in 0..mp {
        let mut sup: f64 = 0.0;
        let mut zi = 0.0;
        for j in 0..nn {
            let o = (p * nn + j) * m;
            sup = sup.max(sq_dist(
                &a.y.regression[o..o + m],
                &b.y.regression[o..o + m],
            ));
            if j + 1 < nn {
                let o = (p * nn + j) * md;
                zi += sq_dist(&a.z.regression[o..o + md], &b.z.regression[o..o + md]) * dt;
            }
        }
        num += sup + zi;
    }
    Ok((num / mp as f64).sqrt() / (m as f64).sqrt())
}

/// Solves the EBSVIE by Picard iteration.
pub fn solve_ebsvie(
    spec: &dyn EbsvieSpec,
    ensemble: &PathEnsemble,
    opts: &SolveOptions,
) -> Result<EbsvieSolution> {
    opts.validate()?;
    let plan = RegressionPlan::build(ensemble, &opts.basis)?;
    solve_with_plan(spec, ensemble, &plan, opts)
}

pub(crate) fn solve_with_plan(
    spec: &dyn EbsvieSpec,
    ens: &PathEnsemble,
    plan: &RegressionPlan,
    opts: &SolveOptions,
) -> Result<EbsvieSolution> {
    opts.validate()?;
    let (m, d) = spec.dims();
    check_dims(d, m, ens)?;
    let grid = ens.grid();
    let nn = grid.n_nodes();
    let mp = ens.n_paths();
    let md = m * d;
    // previous and current iterate on both sets, y and z
    let per_field = (nn as u128) * (nn as u128) * (mp as u128) * ((m + md) as u128);
    check_budget("EBSVIE iterates", per_field * 4, opts.memory_budget)?;

    let (beta, capped, c_hat) = match opts.beta {
        Some(b) => (b, false, None),
        None => {
            let c = pilot_constant(spec, ens, plan, &opts.scheme)?;
            let b = (4.0 * c * spec.lipschitz()).max(1.0);
            (b, false, Some(c))
        }
    };
    let beta_max = if grid.s_hi() > 0.0 {
        600.0 / grid.s_hi()
    } else {
        f64::INFINITY
    };
    let (beta, capped) = if beta > beta_max {
        (beta_max, true)
    } else {
        (beta, capped)
    };
    let nrm = BetaNorm::new(beta, opts.p)?;
    let shape = RawShape {
        nodes: grid.nodes(),
        dt: grid.dt(),
        n_paths: mp,
        y_dim: m,
        z_dim: md,
    };

    let mut eta = Paired::new(vec![0.0; mp * nn * m], vec![0.0; mp * nn * m]);
    let mut prev: Option<Vec<(Vec<f64>, Vec<f64>)>> = None;
    let mut deltas: Vec<f64> = Vec::new();
    let mut ratios = Vec::new();
    let mut converged = false;
    let mut outs: Vec<SliceOut>;
    loop {
        let iter_eta = &eta;
        outs = (0..nn)
            .into_par_iter()
            .map(|t_idx| {
                let sl = Slice {
                    spec,
                    t_idx,
                    nodes: grid.nodes(),
                    eta: iter_eta,
                    m,
                };
                solve_slice(&sl, ens, plan, &opts.scheme).map_err(|e| tag_t(e, t_idx))
            })
            .collect::<Result<Vec<_>>>()?;

        let terms: Vec<(f64, f64)> = outs
            .par_iter()
            .enumerate()
            .map(|(t, o)| {
                let (y, z) = (&o.y.regression, &o.z.regression);
                match &prev {
                    Some(pv) => {
                        let (py, pz) = &pv[t];
                        slice_norm_terms(|i| y[i] - py[i], |i| z[i] - pz[i], t, &shape, nrm.p)
                    }
                    None => slice_norm_terms(|i| y[i], |i| z[i], t, &shape, nrm.p),
                }
            })
            .collect();
        let delta = combine_norm_terms(&terms, &shape, nrm);
        if let Some(&last) = deltas.last() {
            ratios.push(if last > 0.0 { delta / last } else { 0.0 });
        }
        deltas.push(delta);
        if !delta.is_finite() {
            return Err(Error::NonFinite {
                stage: "picard delta",
                t_node: None,
                s_node: 0,
                path: 0,
            });
        }
        if delta <= opts.tol {
            converged = true;
        }
        if converged || deltas.len() >= opts.max_iter {
            break;
        }
        let yp: Vec<&[f64]> = outs.iter().map(|o| o.y.primary.as_slice()).collect();
        let yr: Vec<&[f64]> = outs.iter().map(|o| o.y.regression.as_slice()).collect();
        eta = Paired::new(diagonal_of(&yp, mp, nn, m), diagonal_of(&yr, mp, nn, m));
        prev = Some(
            outs.into_iter()
                .map(|o| (o.y.regression, o.z.regression))
                .collect(),
        );
    }
    drop(prev);

    let report = SolveReport {
        picard_iterations: deltas.len(),
        beta_used: beta,
        beta_capped: capped,
        stability_constant: c_hat,
        contraction_ratios: ratios,
        final_delta: *deltas.last().expect("at least one sweep"),
        deltas,
        converged,
        ridge_nodes: plan.ridge_nodes(),
    };

    let mut yp = Vec::with_capacity(nn);
    let mut zp = Vec::with_capacity(nn);
    let mut yr = Vec::new();
    let mut zr = Vec::new();
    for o in outs {
        yp.push(o.y.primary);
        zp.push(o.z.primary);
        if opts.keep_regression {
            yr.push(o.y.regression);
            zr.push(o.z.regression);
        }
    }
    let y = BiTemporalField::from_slices(grid, mp, m, yp)?;
    let z = BiTemporalField::from_slices(grid, mp, md, zp)?;
    let regression = if opts.keep_regression {
        let y = BiTemporalField::from_slices(grid, mp, m, yr)?;
        let z = BiTemporalField::from_slices(grid, mp, md, zr)?;
        let eta = y.diagonal();
        Some(RegressionSide { y, z, eta })
    } else {
        None
    };
    Ok(EbsvieSolution {
        eta: y.diagonal(),
        y,
        z,
        report,
        regression,
        frozen_eta: eta,
    })
}

/// Solution of a Type-I BSVIE: the diagonal and the martingale integrand.
#[derive(Clone, Debug)]
pub struct Type1Solution {
    pub eta: AdaptedField,
    pub zeta: BiTemporalField,
    pub report: SolveReport,
    pub full: EbsvieSolution,
}

/// Checks at ten seeded random points that the generator ignores `y`.
pub(crate) fn spot_check_y_independence(spec: &dyn EbsvieSpec, ens: &PathEnsemble) -> Result<()> {
    if !spec.independent_of_y() {
        return Err(Error::GeneratorDependsOnY(
            "generator is not declared independent of y".into(),
        ));
    }
    let (m, d) = spec.dims();
    let grid = ens.grid();
    let mut rng = ChaCha8Rng::seed_from_u64(0x007E_571D);
    let mut normals = |k: usize| -> Vec<f64> {
        (0..k)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect()
    };
    let mut g1 = vec![0.0; m];
    let mut g2 = vec![0.0; m];
    for _ in 0..10 {
        let pick = normals(3);
        let idx = |u: f64, n: usize| (((u.abs() * 7919.0) as usize) % n.max(1)).min(n - 1);
        let cell = Cell {
            t_idx: idx(pick[0], grid.n_nodes()),
            t: 0.0,
            s_idx: idx(pick[1], grid.n_nodes()),
            s: 0.0,
            path: idx(pick[2], ens.n_paths()),
            role: PathRole::Primary,
        };
        let cell = Cell {
            t: grid.node(cell.t_idx),
            s: grid.node(cell.s_idx),
            ..cell
        };
        let eta = normals(m);
        let y = normals(m);
        let z = normals(m * d);
        let bump = normals(m);
        let y2: Vec<f64> = y.iter().zip(&bump).map(|(a, b)| a + b).collect();
        spec.generator(&cell, &eta, &y, &z, ens.primary(), &mut g1);
        spec.generator(&cell, &eta, &y2, &z, ens.primary(), &mut g2);
        for (a, b) in g1.iter().zip(&g2) {
            if (a - b).abs() > 1e-12 * (1.0 + a.abs()) {
                return Err(Error::GeneratorDependsOnY(format!(
                    "perturbing y changes g at t-node {}, s-node {}, path {}",
                    cell.t_idx, cell.s_idx, cell.path
                )));
            }
        }
    }
    Ok(())
}

/// Solves the Type-I BSVIE `η(t) = ψ(t) + ∫_t^T g(t, s, η(s), ζ(t,s)) ds - ∫_t^T ζ(t,s) dW(s)`.
pub fn solve_type1_bsvie(
    spec: &dyn EbsvieSpec,
    ensemble: &PathEnsemble,
    opts: &SolveOptions,
) -> Result<Type1Solution> {
    spot_check_y_independence(spec, ensemble)?;
    let full = solve_ebsvie(spec, ensemble, opts)?;
    Ok(Type1Solution {
        eta: full.eta.clone(),
        zeta: full.z.clone(),
        report: full.report.clone(),
        full,
    })
}

/// Solves both specs and compares `sup_t Ê[sup_s |ΔY|² + ∫|ΔZ|²]^(1/2)` with
/// `sup_t D(t) + ∫ D(τ) dτ`, where
/// `D(t)² = Ê[|Δψ(t)|² + (∫ |Δg(t, r, η₁, Y₁, Z₁)| dr)²]` along solution 1.
pub fn ebsvie_stability_probe(
    spec1: &dyn EbsvieSpec,
    spec2: &dyn EbsvieSpec,
    ensemble: &PathEnsemble,
    opts: &SolveOptions,
) -> Result<StabilityProbe> {
    if spec1.dims() != spec2.dims() {
        return Err(Error::ShapeMismatch(
            "specs have different dimensions".into(),
        ));
    }
    opts.validate()?;
    let plan = RegressionPlan::build(ensemble, &opts.basis)?;
    let s1 = solve_with_plan(spec1, ensemble, &plan, opts)?;
    let s2 = solve_with_plan(spec2, ensemble, &plan, opts)?;
    let grid = ensemble.grid();
    let nn = grid.n_nodes();
    let dt = grid.dt();
    let mp = ensemble.n_paths();
    let (m, _) = spec1.dims();
    let paths = ensemble.primary();

    let rows: Vec<(f64, f64)> = (0..nn)
        .into_par_iter()
        .map(|t| {
            let mut num = 0.0;
            let mut den = 0.0;
            let mut g1 = vec![0.0; m];
            let mut g2 = vec![0.0; m];
            let mut p1 = vec![0.0; m];
            let mut p2 = vec![0.0; m];
            for p in 0..mp {
                let mut sup: f64 = 0.0;
                let mut zi = 0.0;
                for j in 0..nn {
                    sup = sup.max(sq_dist(s1.y.at(t, p, j), s2.y.at(t, p, j)));
                    if j + 1 < nn {
                        zi += sq_dist(s1.z.at(t, p, j), s2.z.at(t, p, j)) * dt;
                    }
                }
                num += sup + zi;
                let cell = |j: usize| Cell {
                    t_idx: t,
                    t: grid.node(t),
                    s_idx: j,
                    s: grid.node(j),
                    path: p,
                    role: PathRole::Primary,
                };
                spec1.free_term(&cell(nn - 1), paths, &mut p1);
                spec2.free_term(&cell(nn - 1), paths, &mut p2);
                let mut gi = 0.0;
                for j in 0..nn - 1 {
                    let c = cell(j);
                    let eta = s1.eta.at(p, j);
                    spec1.generator(&c, eta, s1.y.at(t, p, j), s1.z.at(t, p, j), paths, &mut g1);
                    spec2.generator(&c, eta, s1.y.at(t, p, j), s1.z.at(t, p, j), paths, &mut g2);
                    gi += sq_dist(&g1, &g2).sqrt() * dt;
                }
                den += sq_dist(&p1, &p2) + gi * gi;
            }
            ((num / mp as f64).sqrt(), (den / mp as f64).sqrt())
        })
        .collect();
    let num = rows.iter().map(|r| r.0).fold(0.0, f64::max);
    let d_sup = rows.iter().map(|r| r.1).fold(0.0, f64::max);
    let d_int: f64 = rows.windows(2).map(|w| 0.5 * (w[0].1 + w[1].1) * dt).sum();
    Ok(StabilityProbe::new(num, d_sup + d_int))
}
