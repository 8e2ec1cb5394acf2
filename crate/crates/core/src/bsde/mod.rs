//! Regression Monte Carlo solver for backward SDEs
//!
//! ```text
//! y(s) = ψ + ∫_s^T g(r, y(r), z(r)) dr - ∫_s^T z(r) dW(r)
//! ```
//!
//! Time stepping is a θ-scheme: with `ĉ_i = Ê_i[y_{i+1} + (1-θ) dt g_{i+1}]`,
//!
//! ```text
//! z_i = Ê_i[(y_{i+1} + (1-θ) dt g_{i+1} - ĉ_i) ΔW_i] / dt
//! y_i = ĉ_i + θ dt g(s_i, y_i, z_i)
//! ```
//!
//! where the implicit `y_i` is resolved by a predictor `y_i = ĉ_i` followed by
//! a fixed number of fixed-point corrections. `θ = 1` is the classical
//! backward Euler scheme; the default `θ = 1/2` is second order in `dt` for
//! smooth deterministic generators. The step leaving the terminal node always
//! uses `θ = 1`.

mod regression;
pub(crate) mod slice;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use regression::{BasisKind, FeatureCtx, RegressionBasis, RegressionPlan, StateExtractor};

use crate::error::{Error, Result};
use crate::fields::{AdaptedField, Paired};
use crate::grid::{PathEnsemble, PathRole, PathSet};
use slice::{solve_slice, SliceProblem};

/// Time-stepping parameters of the backward scheme.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchemeParams {
    pub theta: f64,
    pub inner_corrections: usize,
}

impl Default for SchemeParams {
    fn default() -> Self {
        Self {
            theta: 0.5,
            inner_corrections: 2,
        }
    }
}

impl SchemeParams {
    pub fn euler() -> Self {
        Self {
            theta: 1.0,
            inner_corrections: 2,
        }
    }

    /// `θ = 1` without corrections: the generator is taken at `E_i[Y_{i+1}]`.
    pub fn explicit() -> Self {
        Self {
            theta: 1.0,
            inner_corrections: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "theta must lie in (0, 1], got {}",
                self.theta
            )));
        }
        Ok(())
    }
}

/// Location of a callback evaluation.
///
/// `t` is the Volterra parameter; for plain BSDEs it is fixed at the left end
/// of the grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub t_idx: usize,
    pub t: f64,
    pub s_idx: usize,
    pub s: f64,
    pub path: usize,
    pub role: PathRole,
}

/// Coefficients of a BSDE with values in `R^m` driven by `d` Brownian motions.
///
/// `z` is passed as an `m × d` row-major slice, `z[i * d + k]`.
pub trait BsdeSpec: Sync {
    /// `(m, d)`.
    fn dims(&self) -> (usize, usize);

    /// Lipschitz constant of the generator, used only for heuristics.
    fn lipschitz(&self) -> f64 {
        1.0
    }

    fn terminal(&self, cell: &Cell, paths: &PathSet, out: &mut [f64]);

    fn generator(&self, cell: &Cell, y: &[f64], z: &[f64], paths: &PathSet, out: &mut [f64]);
}

type TerminalFn = dyn Fn(&Cell, &PathSet, &mut [f64]) + Send + Sync;
type GeneratorFn = dyn Fn(&Cell, &[f64], &[f64], &PathSet, &mut [f64]) + Send + Sync;

/// A [`BsdeSpec`] assembled from closures.
#[derive(Clone)]
pub struct FnBsde {
    pub m: usize,
    pub d: usize,
    pub lipschitz: f64,
    terminal: Arc<TerminalFn>,
    generator: Arc<GeneratorFn>,
}

impl FnBsde {
    pub fn new(
        m: usize,
        d: usize,
        terminal: impl Fn(&Cell, &PathSet, &mut [f64]) + Send + Sync + 'static,
        generator: impl Fn(&Cell, &[f64], &[f64], &PathSet, &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        Self {
            m,
            d,
            lipschitz: 1.0,
            terminal: Arc::new(terminal),
            generator: Arc::new(generator),
        }
    }

    pub fn with_lipschitz(mut self, l: f64) -> Self {
        self.lipschitz = l;
        self
    }
}

impl BsdeSpec for FnBsde {
    fn dims(&self) -> (usize, usize) {
        (self.m, self.d)
    }

    fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    fn terminal(&self, cell: &Cell, paths: &PathSet, out: &mut [f64]) {
        (self.terminal)(cell, paths, out)
    }

    fn generator(&self, cell: &Cell, y: &[f64], z: &[f64], paths: &PathSet, out: &mut [f64]) {
        (self.generator)(cell, y, z, paths, out)
    }
}

/// Adapted solution of a BSDE on both path sets.
#[derive(Clone, Debug)]
pub struct BsdeSolution {
    pub y: Paired<AdaptedField>,
    /// `m · d` components per node.
    pub z: Paired<AdaptedField>,
    /// Nodes whose regression needed ridge regularisation.
    pub ridge_nodes: Vec<usize>,
}

struct BsdeAdapter<'a> {
    spec: &'a dyn BsdeSpec,
    nodes: &'a [f64],
    m: usize,
}

impl BsdeAdapter<'_> {
    fn cell(&self, role: PathRole, s_idx: usize, path: usize) -> Cell {
        Cell {
            t_idx: 0,
            t: self.nodes[0],
            s_idx,
            s: self.nodes[s_idx],
            path,
            role,
        }
    }
}

impl SliceProblem for BsdeAdapter<'_> {
    fn m(&self) -> usize {
        self.m
    }

    fn terminal(&self, role: PathRole, path: usize, paths: &PathSet, out: &mut [f64]) {
        let c = self.cell(role, self.nodes.len() - 1, path);
        self.spec.terminal(&c, paths, out)
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
        self.spec.generator(&c, y, z, paths, out)
    }
}

pub(crate) fn check_dims(spec_d: usize, m: usize, ens: &PathEnsemble) -> Result<()> {
    if m == 0 {
        return Err(Error::InvalidArgument(
            "value dimension must be at least 1".into(),
        ));
    }
    if spec_d != ens.dim() {
        return Err(Error::ShapeMismatch(format!(
            "spec expects {spec_d} Brownian coordinates, ensemble has {}",
            ens.dim()
        )));
    }
    Ok(())
}

/// Solves a BSDE with the default scheme.
pub fn solve_bsde(
    spec: &dyn BsdeSpec,
    ensemble: &PathEnsemble,
    basis: &RegressionBasis,
) -> Result<BsdeSolution> {
    let plan = RegressionPlan::build(ensemble, basis)?;
    solve_bsde_with_plan(spec, ensemble, &plan, &SchemeParams::default())
}

/// Solves a BSDE reusing a prebuilt regression plan.
pub fn solve_bsde_with_plan(
    spec: &dyn BsdeSpec,
    ensemble: &PathEnsemble,
    plan: &RegressionPlan,
    scheme: &SchemeParams,
) -> Result<BsdeSolution> {
    scheme.validate()?;
    let (m, d) = spec.dims();
    check_dims(d, m, ensemble)?;
    let grid = ensemble.grid();
    let adapter = BsdeAdapter {
        spec,
        nodes: grid.nodes(),
        m,
    };
    let out = solve_slice(&adapter, ensemble, plan, scheme)?;
    let mp = ensemble.n_paths();
    let y = out
        .y
        .map(|v| AdaptedField::from_values(grid, mp, m, v).expect("slice shape"));
    let z = out
        .z
        .map(|v| AdaptedField::from_values(grid, mp, m * d, v).expect("slice shape"));
    Ok(BsdeSolution {
        y,
        z,
        ridge_nodes: plan.ridge_nodes(),
    })
}

/// Outcome of a stability probe: solution distance over data distance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityProbe {
    pub numerator: f64,
    pub denominator: f64,
    pub ratio: f64,
}

impl StabilityProbe {
    pub(crate) fn new(numerator: f64, denominator: f64) -> Self {
        let ratio = if numerator == 0.0 {
            0.0
        } else if denominator == 0.0 {
            f64::INFINITY
        } else {
            numerator / denominator
        };
        Self {
            numerator,
            denominator,
            ratio,
        }
    }
}

/// Solves both specs on the same ensemble and compares
/// `Ê[sup_s |Δy|² + ∫|Δz|²]^(1/2)` with
/// `Ê[|Δψ|² + (∫|g₁ - g₂|(s, y₁, z₁) ds)²]^(1/2)` on the primary set.
pub fn bsde_stability_probe(
    spec1: &dyn BsdeSpec,
    spec2: &dyn BsdeSpec,
    ensemble: &PathEnsemble,
    basis: &RegressionBasis,
) -> Result<StabilityProbe> {
    if spec1.dims() != spec2.dims() {
        return Err(Error::ShapeMismatch(
            "specs have different dimensions".into(),
        ));
    }
    let plan = RegressionPlan::build(ensemble, basis)?;
    let scheme = SchemeParams::default();
    let s1 = solve_bsde_with_plan(spec1, ensemble, &plan, &scheme)?;
    let s2 = solve_bsde_with_plan(spec2, ensemble, &plan, &scheme)?;
    let grid = ensemble.grid();
    let n = grid.n_steps();
    let dt = grid.dt();
    let (m, _) = spec1.dims();
    let paths = ensemble.primary();
    let mp = ensemble.n_paths();
    let (mut num, mut den) = (0.0, 0.0);
    let mut g1 = vec![0.0; m];
    let mut g2 = vec![0.0; m];
    let mut p1 = vec![0.0; m];
    let mut p2 = vec![0.0; m];
    for p in 0..mp {
        let (y1, y2) = (&s1.y.primary, &s2.y.primary);
        let (z1, z2) = (&s1.z.primary, &s2.z.primary);
        let mut sup: f64 = 0.0;
        let mut zint = 0.0;
        for j in 0..=n {
            sup = sup.max(sq_dist(y1.at(p, j), y2.at(p, j)));
            if j < n {
                zint += sq_dist(z1.at(p, j), z2.at(p, j)) * dt;
            }
        }
        num += sup + zint;
        let cell = |j: usize| Cell {
            t_idx: 0,
            t: grid.node(0),
            s_idx: j,
            s: grid.node(j),
            path: p,
            role: PathRole::Primary,
        };
        spec1.terminal(&cell(n), paths, &mut p1);
        spec2.terminal(&cell(n), paths, &mut p2);
        let mut gint = 0.0;
        for j in 0..n {
            spec1.generator(&cell(j), y1.at(p, j), z1.at(p, j), paths, &mut g1);
            spec2.generator(&cell(j), y1.at(p, j), z1.at(p, j), paths, &mut g2);
            gint += sq_dist(&g1, &g2).sqrt() * dt;
        }
        den += sq_dist(&p1, &p2) + gint * gint;
    }
    Ok(StabilityProbe::new(
        (num / mp as f64).sqrt(),
        (den / mp as f64).sqrt(),
    ))
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{make_grid, simulate_paths};

    /// The θ-scheme residual `y_{i+1} + (1-θ)dt g_{i+1} + θ dt g_i - y_i` satisfies
    /// the normal equations of the regression-set design.
    #[test]
    fn residual_is_orthogonal_to_features() {
        let g = make_grid(0.0, 1.0, 12).unwrap();
        let e = simulate_paths(&g, 400, 1, 9).unwrap();
        let ex: StateExtractor = Arc::new(|c: &FeatureCtx<'_>, out: &mut Vec<f64>| {
            out.push(c.paths.brownian(c.path, c.node, 0))
        });
        let plan = RegressionPlan::build(&e, &RegressionBasis::state(2, ex)).unwrap();
        let regression::Scheme::Now(fits) = &plan.scheme else {
            unreachable!()
        };
        let scheme = SchemeParams {
            theta: 0.5,
            inner_corrections: 0,
        };
        let a = 0.7;
        let spec = FnBsde::new(
            1,
            1,
            |c, p, o| o[0] = p.brownian(c.path, c.s_idx, 0).exp(),
            move |_, y, _, _, o| o[0] = a * y[0],
        );
        let sol = solve_bsde_with_plan(&spec, &e, &plan, &scheme).unwrap();
        let y = &sol.y.regression;
        let dt = g.dt();
        let n = g.n_steps();
        for i in 0..n {
            let theta = if i == n - 1 { 1.0 } else { 0.5 };
            let fit = &fits[i];
            let k = fit.n_features();
            let mut dot = vec![0.0; k];
            let mut scale = vec![0.0; k];
            for p in 0..400 {
                // inner_corrections = 0 evaluates g once at the predictor
                let chat = y.get(p, i, 0) / (1.0 + theta * dt * a);
                let g_next = if i + 1 < n {
                    a * y.get(p, i + 1, 0)
                } else {
                    0.0
                };
                let resid = y.get(p, i + 1, 0) + (1.0 - theta) * dt * g_next - chat;
                for c in 0..k {
                    dot[c] += fit.reg_row(p)[c] * resid;
                    scale[c] += (fit.reg_row(p)[c] * y.get(p, i + 1, 0)).abs();
                }
            }
            for c in 0..k {
                assert!(
                    dot[c].abs() <= 1e-8 * scale[c],
                    "node {i} feature {c}: {} vs {}",
                    dot[c],
                    scale[c]
                );
            }
        }
    }
}
