//! The linear equation for `(∂tY, ∂tZ)`:
//! terminal `∂tψ(t)`, generator `g_t + g_y·∂tY + Σ g_z·∂tZ` along the base solution.
//! It is solved jointly with the base equation, with the base diagonal frozen.

use rayon::prelude::*;
use smallvec::{smallvec, SmallVec};

type Buf = SmallVec<[f64; 16]>;

use super::{tag_t, EbsvieDerivatives, EbsvieSolution, EbsvieSpec, Slice, SolveOptions};
use crate::bsde::slice::{solve_slice, SliceProblem};
use crate::bsde::{check_dims, RegressionPlan};
use crate::error::{check_budget, Error, Result};
use crate::fields::{BiTemporalField, Paired};
use crate::grid::{PathEnsemble, PathRole, PathSet};

/// `(∂tY, ∂tZ)` on the primary path set.
#[derive(Clone, Debug)]
pub struct DerivativeSolution {
    pub dy: BiTemporalField,
    pub dz: BiTemporalField,
    /// `(∂tY, ∂tZ)` on the regression set, when requested.
    pub regression: Option<(BiTemporalField, BiTemporalField)>,
}

struct Augmented<'a> {
    base: Slice<'a>,
    der: &'a dyn EbsvieDerivatives,
    d: usize,
}

impl SliceProblem for Augmented<'_> {
    fn m(&self) -> usize {
        2 * self.base.m
    }

    fn terminal(&self, role: PathRole, path: usize, paths: &PathSet, out: &mut [f64]) {
        let m = self.base.m;
        let c = self.base.cell(role, self.base.nodes.len() - 1, path);
        self.base.spec.free_term(&c, paths, &mut out[..m]);
        self.der.free_term_dt(&c, paths, &mut out[m..]);
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
        let m = self.base.m;
        let md = m * self.d;
        let c = self.base.cell(role, s_idx, path);
        let eta = self.base.eta_at(role, path, s_idx);
        let (y0, dy) = y.split_at(m);
        let (z0, dz) = z.split_at(md);
        self.base
            .spec
            .generator(&c, eta, y0, z0, paths, &mut out[..m]);
        let mut gy: Buf = smallvec![0.0; m * m];
        let mut gz: Buf = smallvec![0.0; m * md];
        let gt = &mut out[m..];
        self.der.generator_dt(&c, eta, y0, z0, paths, gt);
        self.der.generator_dy(&c, eta, y0, z0, paths, &mut gy);
        self.der.generator_dz(&c, eta, y0, z0, paths, &mut gz);
        for i in 0..m {
            let mut acc = 0.0;
            for j in 0..m {
                acc += gy[i * m + j] * dy[j];
            }
            for q in 0..md {
                acc += gz[i * md + q] * dz[q];
            }
            gt[i] += acc;
        }
    }
}

/// The derivative equation alone, with coefficients tabulated along a stored
/// base solution. Rows are `[g_t | g_y | g_z]` per `(path, node)`.
struct Linearised<'a> {
    base: Slice<'a>,
    der: &'a dyn EbsvieDerivatives,
    md: usize,
    table: Paired<Vec<f64>>,
}

impl<'a> Linearised<'a> {
    fn new(
        base: Slice<'a>,
        der: &'a dyn EbsvieDerivatives,
        d: usize,
        fields: Paired<(&BiTemporalField, &BiTemporalField)>,
        ens: &PathEnsemble,
    ) -> Self {
        let m = base.m;
        let md = m * d;
        let w = m + m * m + m * md;
        let nn = base.nodes.len();
        let t = base.t_idx;
        let build = |role: PathRole| {
            let (y, z) = *fields.get(role);
            let paths = ens.set(role);
            let mut v = vec![0.0; ens.n_paths() * nn * w];
            for (cell, row) in v.chunks_mut(w).enumerate() {
                let (p, s) = (cell / nn, cell % nn);
                let c = base.cell(role, s, p);
                let eta = base.eta_at(role, p, s);
                let (y0, z0) = (y.at(t, p, s), z.at(t, p, s));
                let (gt, rest) = row.split_at_mut(m);
                let (gy, gz) = rest.split_at_mut(m * m);
                der.generator_dt(&c, eta, y0, z0, paths, gt);
                der.generator_dy(&c, eta, y0, z0, paths, gy);
                der.generator_dz(&c, eta, y0, z0, paths, gz);
            }
            v
        };
        let table = Paired::new(build(PathRole::Primary), build(PathRole::Regression));
        Self {
            base,
            der,
            md,
            table,
        }
    }
}

impl SliceProblem for Linearised<'_> {
    fn m(&self) -> usize {
        self.base.m
    }

    fn terminal(&self, role: PathRole, path: usize, paths: &PathSet, out: &mut [f64]) {
        let c = self.base.cell(role, self.base.nodes.len() - 1, path);
        self.der.free_term_dt(&c, paths, out);
    }

    fn generator(
        &self,
        role: PathRole,
        s_idx: usize,
        path: usize,
        dy: &[f64],
        dz: &[f64],
        _: &PathSet,
        out: &mut [f64],
    ) {
        let (m, md) = (self.base.m, self.md);
        let w = m + m * m + m * md;
        let o = (path * self.base.nodes.len() + s_idx) * w;
        let row = &self.table.get(role)[o..o + w];
        let (gt, rest) = row.split_at(m);
        let (gy, gz) = rest.split_at(m * m);
        for i in 0..m {
            let mut acc = gt[i];
            for j in 0..m {
                acc += gy[i * m + j] * dy[j];
            }
            for q in 0..md {
                acc += gz[i * md + q] * dz[q];
            }
            out[i] = acc;
        }
    }
}

/// Solves for `(∂tY, ∂tZ)` given a converged base solution.
pub fn solve_derivative_ebsvie(
    spec: &dyn EbsvieSpec,
    ensemble: &PathEnsemble,
    base: &EbsvieSolution,
    opts: &SolveOptions,
) -> Result<DerivativeSolution> {
    opts.validate()?;
    let plan = RegressionPlan::build(ensemble, &opts.basis)?;
    solve_derivative_with_plan(spec, ensemble, &plan, base, opts)
}

pub(crate) fn solve_derivative_with_plan(
    spec: &dyn EbsvieSpec,
    ens: &PathEnsemble,
    plan: &RegressionPlan,
    base: &EbsvieSolution,
    opts: &SolveOptions,
) -> Result<DerivativeSolution> {
    let der = spec.derivatives().ok_or(Error::MissingDerivatives(
        "EBSVIE derivative equation needs ∂tψ, g_t, g_y, g_z",
    ))?;
    let (m, d) = spec.dims();
    check_dims(d, m, ens)?;
    let grid = ens.grid();
    let nn = grid.n_nodes();
    let mp = ens.n_paths();
    let md = m * d;
    if base.y.n_paths() != mp || base.y.n_nodes() != nn || base.y.dim() != m {
        return Err(Error::ShapeMismatch(
            "base solution does not match the ensemble".into(),
        ));
    }
    let per_field = (nn as u128) * (nn as u128) * (mp as u128) * ((m + md) as u128);
    check_budget("EBSVIE derivative", per_field * 4, opts.memory_budget)?;

    let slice = |t_idx| Slice {
        spec,
        t_idx,
        nodes: grid.nodes(),
        eta: &base.frozen_eta,
        m,
    };
    let outs = match &base.regression {
        // the base solution is stored on both sets: solve the linear part only
        Some(reg) => (0..nn)
            .into_par_iter()
            .map(|t_idx| {
                let fields = Paired::new((&base.y, &base.z), (&reg.y, &reg.z));
                let prob = Linearised::new(slice(t_idx), der, d, fields, ens);
                let out =
                    solve_slice(&prob, ens, plan, &opts.scheme).map_err(|e| tag_t(e, t_idx))?;
                let reg = opts
                    .keep_regression
                    .then_some((out.y.regression, out.z.regression));
                Ok(((out.y.primary, out.z.primary), reg))
            })
            .collect::<Result<Vec<_>>>()?,
        None => (0..nn)
            .into_par_iter()
            .map(|t_idx| {
                let prob = Augmented {
                    base: slice(t_idx),
                    der,
                    d,
                };
                let out =
                    solve_slice(&prob, ens, plan, &opts.scheme).map_err(|e| tag_t(e, t_idx))?;
                let split = |y: &[f64], z: &[f64]| {
                    let mut dy = vec![0.0; mp * nn * m];
                    let mut dz = vec![0.0; mp * nn * md];
                    for cell in 0..mp * nn {
                        dy[cell * m..(cell + 1) * m]
                            .copy_from_slice(&y[cell * 2 * m + m..(cell + 1) * 2 * m]);
                        dz[cell * md..(cell + 1) * md]
                            .copy_from_slice(&z[cell * 2 * md + md..(cell + 1) * 2 * md]);
                    }
                    (dy, dz)
                };
                let prim = split(&out.y.primary, &out.z.primary);
                let reg = opts
                    .keep_regression
                    .then(|| split(&out.y.regression, &out.z.regression));
                Ok((prim, reg))
            })
            .collect::<Result<Vec<_>>>()?,
    };
    let mut dy = Vec::with_capacity(nn);
    let mut dz = Vec::with_capacity(nn);
    let mut ry = Vec::new();
    let mut rz = Vec::new();
    for ((a, b), reg) in outs {
        dy.push(a);
        dz.push(b);
        if let Some((a, b)) = reg {
            ry.push(a);
            rz.push(b);
        }
    }
    let regression = if opts.keep_regression {
        Some((
            BiTemporalField::from_slices(grid, mp, m, ry)?,
            BiTemporalField::from_slices(grid, mp, md, rz)?,
        ))
    } else {
        None
    };
    Ok(DerivativeSolution {
        dy: BiTemporalField::from_slices(grid, mp, m, dy)?,
        dz: BiTemporalField::from_slices(grid, mp, md, dz)?,
        regression,
    })
}
