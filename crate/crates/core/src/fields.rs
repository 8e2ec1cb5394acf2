//! Adapted one-parameter processes, bi-temporal fields and their norms.

use serde::{Deserialize, Serialize};

use crate::error::{check_budget, Error, Result, DEFAULT_MEMORY_BUDGET};
use crate::grid::{PathEnsemble, TimeGrid};

/// A process sampled per (path, node), stored `[path][node][component]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptedField {
    grid: TimeGrid,
    n_paths: usize,
    dim: usize,
    values: Vec<f64>,
}

impl AdaptedField {
    pub fn zeros(grid: &TimeGrid, n_paths: usize, dim: usize) -> Self {
        Self {
            grid: grid.clone(),
            n_paths,
            dim,
            values: vec![0.0; n_paths * grid.n_nodes() * dim],
        }
    }

    pub fn from_values(
        grid: &TimeGrid,
        n_paths: usize,
        dim: usize,
        values: Vec<f64>,
    ) -> Result<Self> {
        let want = n_paths * grid.n_nodes() * dim;
        if values.len() != want {
            return Err(Error::ShapeMismatch(format!(
                "adapted field expects {want} values, got {}",
                values.len()
            )));
        }
        Ok(Self {
            grid: grid.clone(),
            n_paths,
            dim,
            values,
        })
    }

    /// Builds a field from `f(path, node, out)`.
    pub fn from_fn(
        grid: &TimeGrid,
        n_paths: usize,
        dim: usize,
        mut f: impl FnMut(usize, usize, &mut [f64]),
    ) -> Self {
        let mut out = Self::zeros(grid, n_paths, dim);
        let nn = grid.n_nodes();
        for path in 0..n_paths {
            for node in 0..nn {
                let o = (path * nn + node) * dim;
                f(path, node, &mut out.values[o..o + dim]);
            }
        }
        out
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn n_nodes(&self) -> usize {
        self.grid.n_nodes()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    #[inline]
    fn offset(&self, path: usize, node: usize) -> usize {
        (path * self.grid.n_nodes() + node) * self.dim
    }

    #[inline]
    pub fn get(&self, path: usize, node: usize, k: usize) -> f64 {
        self.values[self.offset(path, node) + k]
    }

    #[inline]
    pub fn set(&mut self, path: usize, node: usize, k: usize, v: f64) {
        let o = self.offset(path, node);
        self.values[o + k] = v;
    }

    #[inline]
    pub fn at(&self, path: usize, node: usize) -> &[f64] {
        let o = self.offset(path, node);
        &self.values[o..o + self.dim]
    }

    #[inline]
    pub fn at_mut(&mut self, path: usize, node: usize) -> &mut [f64] {
        let o = self.offset(path, node);
        &mut self.values[o..o + self.dim]
    }

    /// Ensemble mean of component `k` at `node`.
    pub fn mean_at(&self, node: usize, k: usize) -> f64 {
        (0..self.n_paths).map(|p| self.get(p, node, k)).sum::<f64>() / self.n_paths as f64
    }

    /// Values of all paths at `node`, `[path][component]`.
    pub fn node_values(&self, node: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_paths * self.dim);
        for p in 0..self.n_paths {
            out.extend_from_slice(self.at(p, node));
        }
        out
    }

    /// Brownian paths `W(s) - W(S)` of one set of an ensemble as a field.
    pub fn brownian(ensemble: &PathEnsemble, role: crate::grid::PathRole) -> Self {
        let set = ensemble.set(role);
        let d = set.dim();
        let mut out = Self::zeros(ensemble.grid(), set.n_paths(), d);
        for p in 0..set.n_paths() {
            let w = set.brownian_path(p);
            let o = out.offset(p, 0);
            out.values[o..o + w.len()].copy_from_slice(&w);
        }
        out
    }
}

/// A two-parameter field per (t-node, path, s-node), stored
/// `[t][path][s][component]` so that a fixed-t slice is contiguous.
#[derive(Clone, Debug, PartialEq)]
pub struct BiTemporalField {
    grid: TimeGrid,
    n_paths: usize,
    dim: usize,
    values: Vec<f64>,
}

impl BiTemporalField {
    pub fn zeros(grid: &TimeGrid, n_paths: usize, dim: usize) -> Result<Self> {
        Self::zeros_with_budget(grid, n_paths, dim, DEFAULT_MEMORY_BUDGET)
    }

    pub fn zeros_with_budget(
        grid: &TimeGrid,
        n_paths: usize,
        dim: usize,
        budget: u128,
    ) -> Result<Self> {
        let nn = grid.n_nodes() as u128;
        check_budget(
            "bi-temporal field",
            nn * nn * n_paths as u128 * dim as u128,
            budget,
        )?;
        Ok(Self {
            grid: grid.clone(),
            n_paths,
            dim,
            values: vec![0.0; grid.n_nodes() * grid.n_nodes() * n_paths * dim],
        })
    }

    pub fn from_values(
        grid: &TimeGrid,
        n_paths: usize,
        dim: usize,
        values: Vec<f64>,
    ) -> Result<Self> {
        let want = grid.n_nodes() * grid.n_nodes() * n_paths * dim;
        if values.len() != want {
            return Err(Error::ShapeMismatch(format!(
                "bi-temporal field expects {want} values, got {}",
                values.len()
            )));
        }
        Ok(Self {
            grid: grid.clone(),
            n_paths,
            dim,
            values,
        })
    }

    /// Builds a field from `f(t_node, path, s_node, out)`.
    pub fn from_fn(
        grid: &TimeGrid,
        n_paths: usize,
        dim: usize,
        mut f: impl FnMut(usize, usize, usize, &mut [f64]),
    ) -> Result<Self> {
        let mut out = Self::zeros(grid, n_paths, dim)?;
        let nn = grid.n_nodes();
        for t in 0..nn {
            for p in 0..n_paths {
                for s in 0..nn {
                    f(t, p, s, out.at_mut(t, p, s));
                }
            }
        }
        Ok(out)
    }

    /// Stacks per-t slices, each laid out `[path][s][component]`.
    pub fn from_slices(
        grid: &TimeGrid,
        n_paths: usize,
        dim: usize,
        slices: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let nn = grid.n_nodes();
        if slices.len() != nn || slices.iter().any(|s| s.len() != n_paths * nn * dim) {
            return Err(Error::ShapeMismatch(
                "slice count or length does not match grid".into(),
            ));
        }
        Self::from_values(grid, n_paths, dim, slices.concat())
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn n_nodes(&self) -> usize {
        self.grid.n_nodes()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    fn slice_len(&self) -> usize {
        self.n_paths * self.grid.n_nodes() * self.dim
    }

    #[inline]
    fn offset(&self, t: usize, path: usize, s: usize) -> usize {
        let nn = self.grid.n_nodes();
        ((t * self.n_paths + path) * nn + s) * self.dim
    }

    #[inline]
    pub fn get(&self, t: usize, path: usize, s: usize, k: usize) -> f64 {
        self.values[self.offset(t, path, s) + k]
    }

    #[inline]
    pub fn at(&self, t: usize, path: usize, s: usize) -> &[f64] {
        let o = self.offset(t, path, s);
        &self.values[o..o + self.dim]
    }

    #[inline]
    pub fn at_mut(&mut self, t: usize, path: usize, s: usize) -> &mut [f64] {
        let o = self.offset(t, path, s);
        &mut self.values[o..o + self.dim]
    }

    /// The fixed-t slice, laid out `[path][s][component]`.
    pub fn slice(&self, t: usize) -> &[f64] {
        let l = self.slice_len();
        &self.values[t * l..(t + 1) * l]
    }

    pub fn slice_mut(&mut self, t: usize) -> &mut [f64] {
        let l = self.slice_len();
        &mut self.values[t * l..(t + 1) * l]
    }

    /// The fixed-t slice as an adapted field.
    pub fn slice_field(&self, t: usize) -> AdaptedField {
        AdaptedField {
            grid: self.grid.clone(),
            n_paths: self.n_paths,
            dim: self.dim,
            values: self.slice(t).to_vec(),
        }
    }

    /// The diagonal `s -> field(s, s)`.
    pub fn diagonal(&self) -> AdaptedField {
        AdaptedField::from_fn(&self.grid, self.n_paths, self.dim, |p, j, out| {
            out.copy_from_slice(self.at(j, p, j));
        })
    }

    /// Largest absolute value over all entries.
    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |a, v| a.max(v.abs()))
    }

    /// Empirical sup-s L² distance between adjacent t-slices, maximised over t.
    pub fn max_adjacent_t_distance(&self) -> f64 {
        let nn = self.grid.n_nodes();
        let mut worst = 0.0_f64;
        for t in 0..nn - 1 {
            let mut sup = 0.0_f64;
            for s in 0..nn {
                let mut acc = 0.0;
                for p in 0..self.n_paths {
                    let a = self.at(t, p, s);
                    let b = self.at(t + 1, p, s);
                    acc += a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
                }
                sup = sup.max((acc / self.n_paths as f64).sqrt());
            }
            worst = worst.max(sup);
        }
        worst
    }
}

/// A value computed on both the primary and the regression path sets.
#[derive(Clone, Debug, PartialEq)]
pub struct Paired<T> {
    pub primary: T,
    pub regression: T,
}

impl<T> Paired<T> {
    pub fn new(primary: T, regression: T) -> Self {
        Self {
            primary,
            regression,
        }
    }

    pub fn get(&self, role: crate::grid::PathRole) -> &T {
        match role {
            crate::grid::PathRole::Primary => &self.primary,
            crate::grid::PathRole::Regression => &self.regression,
        }
    }

    pub fn map<U>(self, mut f: impl FnMut(T) -> U) -> Paired<U> {
        Paired {
            primary: f(self.primary),
            regression: f(self.regression),
        }
    }
}

/// Parameters of the exponentially weighted solution norm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaNorm {
    pub beta: f64,
    pub p: f64,
}

impl BetaNorm {
    pub fn new(beta: f64, p: f64) -> Result<Self> {
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "beta must be finite and >= 0, got {beta}"
            )));
        }
        if !(p >= 2.0 && p.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "p must be finite and >= 2, got {p}"
            )));
        }
        Ok(Self { beta, p })
    }
}

impl Default for BetaNorm {
    fn default() -> Self {
        Self { beta: 1.0, p: 2.0 }
    }
}

fn euclid2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// `sup_t (mean_path sup_s |y(t,s)|^p)^(1/p)`.
pub fn empirical_sup_norm(field: &BiTemporalField, p: f64) -> Result<f64> {
    if field.n_paths == 0 {
        return Err(Error::InvalidArgument("empty ensemble".into()));
    }
    if !(p >= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "exponent must be >= 1, got {p}"
        )));
    }
    let nn = field.grid.n_nodes();
    let mut best = 0.0_f64;
    for t in 0..nn {
        let mut acc = 0.0;
        for path in 0..field.n_paths {
            let sup = (0..nn)
                .map(|s| euclid2(field.at(t, path, s)))
                .fold(0.0_f64, f64::max);
            acc += sup.sqrt().powf(p);
        }
        best = best.max((acc / field.n_paths as f64).powf(1.0 / p));
    }
    Ok(best)
}

/// Raw layout description for [`beta_norm_raw`].
pub(crate) struct RawShape<'a> {
    pub nodes: &'a [f64],
    pub dt: f64,
    pub n_paths: usize,
    pub y_dim: usize,
    pub z_dim: usize,
}

/// Path sums of the forward (`s >= t`) and backward (`s <= t`) terms of the
/// β-norm for one t-slice laid out `[path][s][component]`. `y` and `z`
/// return slice entries by flat index.
pub(crate) fn slice_norm_terms(
    y: impl Fn(usize) -> f64,
    z: impl Fn(usize) -> f64,
    t: usize,
    shape: &RawShape<'_>,
    p: f64,
) -> (f64, f64) {
    let nn = shape.nodes.len();
    let (yd, zd) = (shape.y_dim, shape.z_dim);
    let (mut fwd, mut bwd) = (0.0, 0.0);
    for path in 0..shape.n_paths {
        let yo = path * nn * yd;
        let zo = path * nn * zd;
        let mut sup_hi = 0.0_f64;
        let mut sup_lo = 0.0_f64;
        for s in 0..nn {
            let a: f64 = (0..yd).map(|c| y(yo + s * yd + c).powi(2)).sum();
            if s >= t {
                sup_hi = sup_hi.max(a);
            }
            if s <= t {
                sup_lo = sup_lo.max(a);
            }
        }
        let mut int_hi = 0.0;
        let mut int_lo = 0.0;
        for s in 0..nn - 1 {
            let a: f64 = (0..zd).map(|c| z(zo + s * zd + c).powi(2)).sum::<f64>() * shape.dt;
            if s >= t {
                int_hi += a;
            } else {
                int_lo += a;
            }
        }
        fwd += sup_hi.powf(p / 2.0) + int_hi.powf(p / 2.0);
        bwd += sup_lo.powf(p / 2.0) + int_lo.powf(p / 2.0);
    }
    (fwd, bwd)
}

/// Combines per-slice terms into the norm.
pub(crate) fn combine_norm_terms(terms: &[(f64, f64)], shape: &RawShape<'_>, nrm: BetaNorm) -> f64 {
    let m = shape.n_paths as f64;
    terms
        .iter()
        .enumerate()
        .map(|(t, (fwd, bwd))| {
            ((nrm.beta * shape.nodes[t]).exp() * fwd / m + bwd / m).powf(1.0 / nrm.p)
        })
        .fold(0.0, f64::max)
}

/// The β-norm on `[t][path][s][component]` buffers.
pub(crate) fn beta_norm_raw(y: &[f64], z: &[f64], shape: &RawShape<'_>, nrm: BetaNorm) -> f64 {
    let nn = shape.nodes.len();
    let ys = shape.n_paths * nn * shape.y_dim;
    let zs = shape.n_paths * nn * shape.z_dim;
    let terms: Vec<(f64, f64)> = (0..nn)
        .map(|t| {
            let yt = &y[t * ys..(t + 1) * ys];
            let zt = &z[t * zs..(t + 1) * zs];
            slice_norm_terms(|i| yt[i], |i| zt[i], t, shape, nrm.p)
        })
        .collect();
    combine_norm_terms(&terms, shape, nrm)
}

/// Discrete β-norm of a `(y, z)` pair of bi-temporal fields, with
/// left-endpoint quadrature for the `z` integrals.
pub fn beta_norm(y: &BiTemporalField, z: &BiTemporalField, nrm: BetaNorm) -> Result<f64> {
    if y.grid != z.grid || y.n_paths != z.n_paths {
        return Err(Error::ShapeMismatch(
            "y and z must share grid and path count".into(),
        ));
    }
    if y.n_paths == 0 {
        return Err(Error::InvalidArgument("empty ensemble".into()));
    }
    let shape = RawShape {
        nodes: y.grid.nodes(),
        dt: y.grid.dt(),
        n_paths: y.n_paths,
        y_dim: y.dim,
        z_dim: z.dim,
    };
    Ok(beta_norm_raw(&y.values, &z.values, &shape, nrm))
}

/// Either kind of field, for adaptedness checks over mixed outputs.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyField {
    Adapted(AdaptedField),
    BiTemporal(BiTemporalField),
}

impl From<AdaptedField> for AnyField {
    fn from(f: AdaptedField) -> Self {
        AnyField::Adapted(f)
    }
}

impl From<BiTemporalField> for AnyField {
    fn from(f: BiTemporalField) -> Self {
        AnyField::BiTemporal(f)
    }
}

impl AnyField {
    /// Largest absolute difference between two fields over s-nodes `<= node`.
    fn max_diff_up_to(&self, other: &AnyField, node: usize) -> Option<f64> {
        match (self, other) {
            (AnyField::Adapted(a), AnyField::Adapted(b)) => {
                if a.values.len() != b.values.len() {
                    return None;
                }
                let mut worst = 0.0_f64;
                for p in 0..a.n_paths {
                    for j in 0..=node.min(a.n_nodes() - 1) {
                        for (x, y) in a.at(p, j).iter().zip(b.at(p, j)) {
                            worst = worst.max((x - y).abs());
                        }
                    }
                }
                Some(worst)
            }
            (AnyField::BiTemporal(a), AnyField::BiTemporal(b)) => {
                if a.values.len() != b.values.len() {
                    return None;
                }
                let nn = a.n_nodes();
                let mut worst = 0.0_f64;
                for t in 0..nn {
                    for p in 0..a.n_paths {
                        for s in 0..=node.min(nn - 1) {
                            for (x, y) in a.at(t, p, s).iter().zip(b.at(t, p, s)) {
                                worst = worst.max((x - y).abs());
                            }
                        }
                    }
                }
                Some(worst)
            }
            _ => None,
        }
    }
}

/// Re-runs `producer` with primary increments of index `>= node` redrawn and
/// reports whether every output is unchanged (to 1e-12) on s-nodes `<= node`.
pub fn scramble_test<F>(producer: F, ensemble: &PathEnsemble, node: usize) -> Result<bool>
where
    F: Fn(&PathEnsemble) -> Result<Vec<AnyField>>,
{
    let base = producer(ensemble)?;
    let scrambled = producer(&ensemble.with_scrambled_future(node, 0xA5A5_0000 + node as u64))?;
    if base.len() != scrambled.len() {
        return Ok(false);
    }
    for (a, b) in base.iter().zip(&scrambled) {
        match a.max_diff_up_to(b, node) {
            Some(d) if d <= 1e-12 => {}
            _ => return Ok(false),
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{make_grid, simulate_paths, PathRole};

    fn const_field(n: usize, m: usize, c: f64) -> BiTemporalField {
        let g = make_grid(0.0, 1.0, n).unwrap();
        BiTemporalField::from_fn(&g, m, 1, |_, _, _, o| o[0] = c).unwrap()
    }

    #[test]
    fn sup_norm_of_zero_and_constant() {
        assert_eq!(
            empirical_sup_norm(&const_field(4, 3, 0.0), 2.0).unwrap(),
            0.0
        );
        for p in [1.0, 2.0, 3.5] {
            let v = empirical_sup_norm(&const_field(4, 3, -1.5), p).unwrap();
            assert!((v - 1.5).abs() < 1e-14);
        }
    }

    #[test]
    fn beta_norm_constant_pair() {
        let y = const_field(8, 2, 1.0);
        let z = const_field(8, 2, 0.0);
        let v = beta_norm(&y, &z, BetaNorm::new(2.0, 2.0).unwrap()).unwrap();
        assert!((v - (2.0_f64.exp() + 1.0).sqrt()).abs() < 1e-12);
        let zero = beta_norm(&z, &z, BetaNorm::new(5.0, 2.0).unwrap()).unwrap();
        assert_eq!(zero, 0.0);
    }

    #[test]
    fn beta_zero_is_unweighted() {
        let g = make_grid(0.0, 1.0, 6).unwrap();
        let y = BiTemporalField::from_fn(&g, 3, 1, |t, p, s, o| {
            o[0] = (t + 2 * p) as f64 - s as f64 * 0.3
        })
        .unwrap();
        let z = BiTemporalField::from_fn(&g, 3, 1, |t, p, s, o| {
            o[0] = (t * s) as f64 * 0.1 + p as f64
        })
        .unwrap();
        let nrm = BetaNorm::new(0.0, 2.0).unwrap();
        let v = beta_norm(&y, &z, nrm).unwrap();
        // hand evaluation with unit weights
        let nn = 7;
        let mut best = 0.0_f64;
        for t in 0..nn {
            let mut acc = 0.0;
            for p in 0..3 {
                let hi = (t..nn)
                    .map(|s| y.get(t, p, s, 0).powi(2))
                    .fold(0.0, f64::max);
                let lo = (0..=t)
                    .map(|s| y.get(t, p, s, 0).powi(2))
                    .fold(0.0, f64::max);
                let ih: f64 = (t..nn - 1).map(|s| z.get(t, p, s, 0).powi(2) / 6.0).sum();
                let il: f64 = (0..t).map(|s| z.get(t, p, s, 0).powi(2) / 6.0).sum();
                acc += hi + ih + lo + il;
            }
            best = best.max((acc / 3.0).sqrt());
        }
        assert!((v - best).abs() < 1e-12);
    }

    #[test]
    fn beta_norm_rejects_mismatch() {
        let a = const_field(4, 2, 1.0);
        let b = const_field(4, 3, 1.0);
        assert!(beta_norm(&a, &b, BetaNorm::default()).is_err());
        assert!(BetaNorm::new(-1.0, 2.0).is_err());
        assert!(BetaNorm::new(1.0, 1.5).is_err());
    }

    #[test]
    fn diagonal_reads_stored_slice() {
        let g = make_grid(0.0, 1.0, 5).unwrap();
        let f =
            BiTemporalField::from_fn(&g, 2, 1, |t, p, s, o| o[0] = (100 * t + 10 * p + s) as f64)
                .unwrap();
        let d = f.diagonal();
        for p in 0..2 {
            for j in 0..6 {
                assert_eq!(d.get(p, j, 0), f.get(j, p, j, 0));
            }
        }
    }

    #[test]
    fn scramble_detects_look_ahead() {
        let g = make_grid(0.0, 1.0, 8).unwrap();
        let e = simulate_paths(&g, 20, 1, 5).unwrap();
        let honest = |e: &PathEnsemble| {
            Ok(vec![AnyField::from(AdaptedField::brownian(
                e,
                PathRole::Primary,
            ))])
        };
        assert!(scramble_test(honest, &e, 4).unwrap());
        let cheat = |e: &PathEnsemble| {
            let w = AdaptedField::brownian(e, PathRole::Primary);
            let n = w.n_nodes() - 1;
            let f =
                AdaptedField::from_fn(e.grid(), w.n_paths(), 1, |p, _, o| o[0] = w.get(p, n, 0));
            Ok(vec![AnyField::from(f)])
        };
        assert!(!scramble_test(cheat, &e, 4).unwrap());
    }
}
