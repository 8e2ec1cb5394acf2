//! Least-squares estimators of conditional expectations.
//!
//! A [`RegressionPlan`] holds, for every node `i < N`, the design matrices of
//! both path sets and the Cholesky factor of the regression-set Gram matrix.
//! It is built once per (ensemble, basis) and shared by every backward solve.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{PathEnsemble, PathRole, PathSet};

/// Which raw variables feed the polynomial features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BasisKind {
    /// Monomials in `W(s_i) - W(S)`.
    Brownian,
    /// Monomials in a user-supplied state vector.
    State,
}

/// Where a feature vector is requested.
pub struct FeatureCtx<'a> {
    pub role: PathRole,
    pub path: usize,
    pub node: usize,
    pub paths: &'a PathSet,
}

/// Pushes the raw state variables of one (path, node) onto `out`.
pub type StateExtractor = Arc<dyn Fn(&FeatureCtx<'_>, &mut Vec<f64>) + Send + Sync>;

/// Polynomial regression basis of total degree `degree`.
#[derive(Clone)]
pub struct RegressionBasis {
    pub kind: BasisKind,
    pub degree: usize,
    extractor: Option<StateExtractor>,
}

impl fmt::Debug for RegressionBasis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RegressionBasis")
            .field("kind", &self.kind)
            .field("degree", &self.degree)
            .finish()
    }
}

impl RegressionBasis {
    pub fn brownian(degree: usize) -> Self {
        Self {
            kind: BasisKind::Brownian,
            degree,
            extractor: None,
        }
    }

    pub fn state(degree: usize, extractor: StateExtractor) -> Self {
        Self {
            kind: BasisKind::State,
            degree,
            extractor: Some(extractor),
        }
    }

    /// Degree 0: plain ensemble means.
    pub fn constant() -> Self {
        Self::brownian(0)
    }

    fn raw_features(&self, cum: &[f64], ctx: &FeatureCtx<'_>, out: &mut Vec<f64>) {
        out.clear();
        match (&self.kind, &self.extractor) {
            (BasisKind::State, Some(ex)) => ex(ctx, out),
            _ => {
                let d = ctx.paths.dim();
                let nn = ctx.paths.n_steps() + 1;
                let o = (ctx.path * nn + ctx.node) * d;
                out.extend_from_slice(&cum[o..o + d]);
            }
        }
    }
}

impl Default for RegressionBasis {
    fn default() -> Self {
        Self::brownian(2)
    }
}

/// Exponent vectors of all monomials in `vars` variables with total degree
/// `1..=degree`, ordered by degree.
fn monomials(vars: usize, degree: usize) -> Vec<Vec<usize>> {
    fn rec(
        vars: usize,
        left: usize,
        start: usize,
        cur: &mut Vec<usize>,
        out: &mut Vec<Vec<usize>>,
    ) {
        if left == 0 {
            let mut e = vec![0; vars];
            for &v in cur.iter() {
                e[v] += 1;
            }
            out.push(e);
            return;
        }
        for v in start..vars {
            cur.push(v);
            rec(vars, left - 1, v, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    for deg in 1..=degree {
        rec(vars, deg, 0, &mut Vec::new(), &mut out);
    }
    out
}

/// Standardised polynomial features of one node.
#[derive(Clone, Debug)]
struct FeatureMap {
    mu: Vec<f64>,
    inv_sd: Vec<f64>,
    monos: Vec<Vec<usize>>,
    keep: Vec<usize>,
}

impl FeatureMap {
    fn n_full(&self) -> usize {
        1 + self.monos.len()
    }

    fn full(&self, raw: &[f64], u: &mut [f64], out: &mut Vec<f64>) {
        for j in 0..raw.len() {
            u[j] = (raw[j] - self.mu[j]) * self.inv_sd[j];
        }
        out.push(1.0);
        for e in &self.monos {
            let mut v = 1.0;
            for (j, &pow) in e.iter().enumerate() {
                if pow > 0 {
                    v *= u[j].powi(pow as i32);
                }
            }
            out.push(v);
        }
    }

    /// Retained features of one raw vector, appended to `out`.
    fn eval(&self, raw: &[f64], u: &mut [f64], full: &mut Vec<f64>, out: &mut Vec<f64>) {
        full.clear();
        self.full(raw, u, full);
        out.extend(self.keep.iter().map(|&c| full[c]));
    }
}

/// Fitted design at one node.
pub(crate) struct NodeFit {
    k: usize,
    n_reg: usize,
    reg: Vec<f64>,
    prim: Vec<f64>,
    chol: nalgebra::linalg::Cholesky<f64, nalgebra::Dyn>,
    ridged: bool,
}

impl NodeFit {
    /// Coefficients of the projection of `target` (one value per
    /// regression path) onto the features.
    pub(crate) fn coef(&self, target: &[f64]) -> DVector<f64> {
        let k = self.k;
        let mut b = DVector::zeros(k);
        for (p, t) in target.iter().enumerate() {
            let row = &self.reg[p * k..(p + 1) * k];
            for c in 0..k {
                b[c] += row[c] * t;
            }
        }
        b /= self.n_reg as f64;
        self.chol.solve(&b)
    }

    #[inline]
    pub(crate) fn eval(&self, role: PathRole, path: usize, coef: &DVector<f64>) -> f64 {
        let rows = match role {
            PathRole::Primary => &self.prim,
            PathRole::Regression => &self.reg,
        };
        dot(&rows[path * self.k..(path + 1) * self.k], coef)
    }

    #[cfg(test)]
    pub(crate) fn n_features(&self) -> usize {
        self.k
    }

    #[cfg(test)]
    pub(crate) fn reg_row(&self, path: usize) -> &[f64] {
        &self.reg[path * self.k..(path + 1) * self.k]
    }
}

#[inline]
fn dot(row: &[f64], coef: &DVector<f64>) -> f64 {
    let mut acc = 0.0;
    for (c, r) in row.iter().enumerate() {
        acc += r * coef[c];
    }
    acc
}

/// Exact one-step conditional moments of the next node's features,
/// `E_i[φ(W_{i+1})]` and `E_i[φ(W_{i+1}) ΔW_i^k]`, per path.
pub(crate) struct Transition {
    k: usize,
    d: usize,
    /// `[path][(1 + d) * k]` for each set.
    rows: [Vec<f64>; 2],
}

impl Transition {
    #[inline]
    fn row(&self, role: PathRole, path: usize) -> &[f64] {
        let w = (1 + self.d) * self.k;
        let r = match role {
            PathRole::Primary => &self.rows[0],
            PathRole::Regression => &self.rows[1],
        };
        &r[path * w..(path + 1) * w]
    }

    /// `E_i[Σ_c coef_c φ_c(W_{i+1})]`.
    #[inline]
    pub(crate) fn mean(&self, role: PathRole, path: usize, coef: &DVector<f64>) -> f64 {
        dot(&self.row(role, path)[..self.k], coef)
    }

    /// `E_i[Σ_c coef_c φ_c(W_{i+1}) ΔW^k]`.
    #[inline]
    pub(crate) fn cross(&self, role: PathRole, path: usize, k: usize, coef: &DVector<f64>) -> f64 {
        let o = (1 + k) * self.k;
        dot(&self.row(role, path)[o..o + self.k], coef)
    }
}

/// How conditional expectations at node `i` are formed.
pub(crate) enum Scheme {
    /// Regress on node-`i` features (state bases).
    Now(Vec<NodeFit>),
    /// Regress on node-`(i+1)` features and integrate the Gaussian step
    /// exactly (Brownian bases). `fits[i]` is the fit at node `i + 1`.
    Later {
        fits: Vec<NodeFit>,
        steps: Vec<Transition>,
    },
}

/// Precomputed regression designs for one (ensemble, basis) pair.
pub struct RegressionPlan {
    pub(crate) scheme: Scheme,
}

impl fmt::Debug for RegressionPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RegressionPlan")
            .field("later", &matches!(self.scheme, Scheme::Later { .. }))
            .field("ridge_nodes", &self.ridge_nodes())
            .finish()
    }
}

impl RegressionPlan {
    pub fn build(ensemble: &PathEnsemble, basis: &RegressionBasis) -> Result<Self> {
        let n = ensemble.grid().n_steps();
        match basis.kind {
            BasisKind::State => {
                if basis.extractor.is_none() {
                    return Err(Error::InvalidArgument(
                        "state basis needs an extractor".into(),
                    ));
                }
                let fits = (0..n)
                    .into_par_iter()
                    .map(|i| {
                        let (raw_r, q) =
                            raw_matrix(basis, ensemble.regression(), PathRole::Regression, i, &[])?;
                        let (raw_p, qp) =
                            raw_matrix(basis, ensemble.primary(), PathRole::Primary, i, &[])?;
                        if q != qp {
                            return Err(Error::ShapeMismatch(
                                "feature count differs between path sets".into(),
                            ));
                        }
                        let m = ensemble.n_paths();
                        let map = feature_map(&raw_r, q, m, basis.degree);
                        fit_node(&map, &raw_r, Some(&raw_p), q, m, i)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Self {
                    scheme: Scheme::Now(fits),
                })
            }
            BasisKind::Brownian => {
                let cum = |set: &PathSet| -> Vec<f64> {
                    let mut v = Vec::with_capacity(set.n_paths() * (n + 1) * set.dim());
                    for p in 0..set.n_paths() {
                        v.extend(set.brownian_path(p));
                    }
                    v
                };
                let cums = [cum(ensemble.primary()), cum(ensemble.regression())];
                let d = ensemble.dim();
                let sd = ensemble.grid().dt().sqrt();
                let (xi, wq) = gauss_hermite_grid(basis.degree / 2 + 2, d);
                let built = (1..=n)
                    .into_par_iter()
                    .map(|node| {
                        let (raw_r, q) = raw_matrix(
                            basis,
                            ensemble.regression(),
                            PathRole::Regression,
                            node,
                            &cums[1],
                        )?;
                        let m = ensemble.n_paths();
                        let map = feature_map(&raw_r, q, m, basis.degree);
                        let fit = fit_node(&map, &raw_r, None, q, m, node)?;
                        let step = transition(
                            &map,
                            &cums,
                            ensemble.n_paths(),
                            n,
                            d,
                            node - 1,
                            sd,
                            &xi,
                            &wq,
                        );
                        Ok((fit, step))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let (fits, steps) = built.into_iter().unzip();
                Ok(Self {
                    scheme: Scheme::Later { fits, steps },
                })
            }
        }
    }

    /// Nodes where the Gram matrix needed ridge regularisation.
    pub fn ridge_nodes(&self) -> Vec<usize> {
        let (fits, shift) = match &self.scheme {
            Scheme::Now(f) => (f, 0),
            Scheme::Later { fits, .. } => (fits, 1),
        };
        fits.iter()
            .enumerate()
            .filter(|(_, n)| n.ridged)
            .map(|(i, _)| i + shift)
            .collect()
    }

    /// Number of retained features of each fitted node.
    pub fn feature_counts(&self) -> Vec<usize> {
        match &self.scheme {
            Scheme::Now(f) | Scheme::Later { fits: f, .. } => f.iter().map(|n| n.k).collect(),
        }
    }
}

fn raw_matrix(
    basis: &RegressionBasis,
    set: &PathSet,
    role: PathRole,
    node: usize,
    cum: &[f64],
) -> Result<(Vec<f64>, usize)> {
    let mut buf = Vec::new();
    let mut all = Vec::new();
    let mut q = None;
    for path in 0..set.n_paths() {
        let ctx = FeatureCtx {
            role,
            path,
            node,
            paths: set,
        };
        basis.raw_features(cum, &ctx, &mut buf);
        match q {
            None => q = Some(buf.len()),
            Some(q) if q != buf.len() => {
                return Err(Error::ShapeMismatch(format!(
                    "state extractor returned {} features at path {path}, expected {q}",
                    buf.len()
                )))
            }
            _ => {}
        }
        all.extend_from_slice(&buf);
    }
    Ok((all, q.unwrap_or(0)))
}

/// Standardisation from regression-set moments, then the columns with
/// non-negligible spread (the intercept is always kept).
fn feature_map(raw_r: &[f64], q: usize, m: usize, degree: usize) -> FeatureMap {
    let mf = m as f64;
    let mut mu = vec![0.0; q];
    let mut var = vec![0.0; q];
    for p in 0..m {
        for j in 0..q {
            mu[j] += raw_r[p * q + j];
        }
    }
    mu.iter_mut().for_each(|v| *v /= mf);
    for p in 0..m {
        for j in 0..q {
            var[j] += (raw_r[p * q + j] - mu[j]).powi(2);
        }
    }
    let inv_sd: Vec<f64> = (0..q)
        .map(|j| {
            let s = (var[j] / mf).sqrt();
            if s > 1e-12 * (1.0 + mu[j].abs()) {
                1.0 / s
            } else {
                0.0
            }
        })
        .collect();
    let monos = if degree == 0 {
        Vec::new()
    } else {
        monomials(q, degree)
    };
    let mut map = FeatureMap {
        mu,
        inv_sd,
        monos,
        keep: Vec::new(),
    };
    let kf = map.n_full();
    let mut full = Vec::with_capacity(m * kf);
    let mut u = vec![0.0; q];
    for p in 0..m {
        map.full(&raw_r[p * q..(p + 1) * q], &mut u, &mut full);
    }
    map.keep.push(0);
    for c in 1..kf {
        let mean = (0..m).map(|p| full[p * kf + c]).sum::<f64>() / mf;
        let v = (0..m)
            .map(|p| (full[p * kf + c] - mean).powi(2))
            .sum::<f64>()
            / mf;
        if v > 1e-14 * (1.0 + mean * mean) {
            map.keep.push(c);
        }
    }
    map
}

/// Rejects factors with a pivot that is negligible next to the largest one.
fn well_conditioned(c: &nalgebra::linalg::Cholesky<f64, nalgebra::Dyn>) -> bool {
    let l = c.l_dirty();
    let diag: Vec<f64> = (0..l.nrows()).map(|i| l[(i, i)] * l[(i, i)]).collect();
    let hi = diag.iter().cloned().fold(0.0_f64, f64::max);
    diag.iter().all(|&v| v > 1e-12 * hi)
}

fn design(map: &FeatureMap, raw: &[f64], q: usize, m: usize) -> Vec<f64> {
    let k = map.keep.len();
    let mut out = Vec::with_capacity(m * k);
    let mut u = vec![0.0; q];
    let mut full = Vec::with_capacity(map.n_full());
    for p in 0..m {
        map.eval(&raw[p * q..(p + 1) * q], &mut u, &mut full, &mut out);
    }
    out
}

fn fit_node(
    map: &FeatureMap,
    raw_r: &[f64],
    raw_p: Option<&[f64]>,
    q: usize,
    m: usize,
    node: usize,
) -> Result<NodeFit> {
    let k = map.keep.len();
    let reg = design(map, raw_r, q, m);
    let prim = raw_p.map(|r| design(map, r, q, m)).unwrap_or_default();
    let mf = m as f64;

    let mut gram = DMatrix::<f64>::zeros(k, k);
    for p in 0..m {
        let row = &reg[p * k..(p + 1) * k];
        for a in 0..k {
            for b in 0..=a {
                gram[(a, b)] += row[a] * row[b];
            }
        }
    }
    for a in 0..k {
        for b in 0..=a {
            let v = gram[(a, b)] / mf;
            gram[(a, b)] = v;
            gram[(b, a)] = v;
        }
    }
    let (chol, ridged) = match gram.clone().cholesky().filter(well_conditioned) {
        Some(c) => (c, false),
        None => {
            let lambda = 1e-8 * gram.trace() / k as f64;
            let mut g = gram;
            for a in 1..k {
                g[(a, a)] += lambda;
            }
            let c = g.cholesky().ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "regression design at node {node} is singular even after ridge"
                ))
            })?;
            (c, true)
        }
    };
    Ok(NodeFit {
        k,
        n_reg: m,
        reg,
        prim,
        chol,
        ridged,
    })
}

/// Probabilists' Gauss-Hermite rule with `q` points (Golub-Welsch).
fn gauss_hermite(q: usize) -> (Vec<f64>, Vec<f64>) {
    let mut j = DMatrix::<f64>::zeros(q, q);
    for i in 1..q {
        let b = (i as f64).sqrt();
        j[(i, i - 1)] = b;
        j[(i - 1, i)] = b;
    }
    let eig = j.symmetric_eigen();
    let mut pts: Vec<(f64, f64)> = (0..q)
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    // symmetrise to remove eigen-solver asymmetry
    for i in 0..q / 2 {
        let x = 0.5 * (pts[q - 1 - i].0 - pts[i].0);
        let w = 0.5 * (pts[q - 1 - i].1 + pts[i].1);
        pts[i] = (-x, w);
        pts[q - 1 - i] = (x, w);
    }
    if q % 2 == 1 {
        pts[q / 2].0 = 0.0;
    }
    let total: f64 = pts.iter().map(|p| p.1).sum();
    (
        pts.iter().map(|p| p.0).collect(),
        pts.iter().map(|p| p.1 / total).collect(),
    )
}

/// Tensor-product rule in `d` dimensions, points laid out `[point][k]`.
fn gauss_hermite_grid(q: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
    let (x1, w1) = gauss_hermite(q);
    let total = q.pow(d as u32);
    let mut xs = Vec::with_capacity(total * d);
    let mut ws = Vec::with_capacity(total);
    for idx in 0..total {
        let mut r = idx;
        let mut w = 1.0;
        for _ in 0..d {
            xs.push(x1[r % q]);
            w *= w1[r % q];
            r /= q;
        }
        ws.push(w);
    }
    (xs, ws)
}

#[allow(clippy::too_many_arguments)]
fn transition(
    map: &FeatureMap,
    cums: &[Vec<f64>; 2],
    m: usize,
    n: usize,
    d: usize,
    from: usize,
    sd: f64,
    xi: &[f64],
    wq: &[f64],
) -> Transition {
    let k = map.keep.len();
    let width = (1 + d) * k;
    let mut rows = [Vec::with_capacity(m * width), Vec::with_capacity(m * width)];
    let mut u = vec![0.0; d];
    let mut full = Vec::with_capacity(map.n_full());
    let mut feat = Vec::with_capacity(k);
    let mut w = vec![0.0; d];
    let mut acc = vec![0.0; width];
    for (r, cum) in cums.iter().enumerate() {
        for p in 0..m {
            let o = (p * (n + 1) + from) * d;
            let base = &cum[o..o + d];
            acc.iter_mut().for_each(|v| *v = 0.0);
            for (qi, &weight) in wq.iter().enumerate() {
                let pt = &xi[qi * d..(qi + 1) * d];
                for kk in 0..d {
                    w[kk] = base[kk] + sd * pt[kk];
                }
                feat.clear();
                map.eval(&w, &mut u, &mut full, &mut feat);
                for c in 0..k {
                    acc[c] += weight * feat[c];
                }
                for kk in 0..d {
                    let dw = sd * pt[kk];
                    for c in 0..k {
                        acc[(1 + kk) * k + c] += weight * feat[c] * dw;
                    }
                }
            }
            rows[r].extend_from_slice(&acc);
        }
    }
    Transition { k, d, rows }
}
