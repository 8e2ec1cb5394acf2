//! Diagonal processes and the Property (D) diagnostic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{AdaptedField, BiTemporalField};
use crate::rates::loglog_slope;

/// `Diag[Z](s_j) = Z(S, s_j) + ∫_S^{s_j} ∂tZ(τ, s_j) dτ`, trapezoidal on the t-nodes.
pub fn compute_diag(z: &BiTemporalField, dz: &BiTemporalField) -> Result<AdaptedField> {
    if z.grid() != dz.grid() || z.n_paths() != dz.n_paths() || z.dim() != dz.dim() {
        return Err(Error::ShapeMismatch(
            "z and ∂tz must share grid, paths and width".into(),
        ));
    }
    let dt = z.grid().dt();
    let w = z.dim();
    Ok(AdaptedField::from_fn(
        z.grid(),
        z.n_paths(),
        w,
        |p, j, out| {
            out.copy_from_slice(z.at(0, p, j));
            for tau in (0..=j).filter(|_| j > 0) {
                let wt = if tau == 0 || tau == j { 0.5 } else { 1.0 };
                for (o, v) in out.iter_mut().zip(dz.at(tau, p, j)) {
                    *o += wt * dt * v;
                }
            }
        },
    ))
}

/// Source of `Ê ∫_t^{t+ε} |Z(t,s) - Diag(s)| ds`.
pub trait GapSource {
    /// `(S, T)`.
    fn horizon(&self) -> (f64, f64);

    fn gap_integral(&self, t: f64, eps: f64) -> Result<f64>;
}

/// Gap between a stored field and a candidate diagonal, trapezoidal in `s`.
pub struct GridGap<'a> {
    pub z: &'a BiTemporalField,
    pub diag: &'a AdaptedField,
}

impl GapSource for GridGap<'_> {
    fn horizon(&self) -> (f64, f64) {
        (self.z.grid().s_lo(), self.z.grid().s_hi())
    }

    fn gap_integral(&self, t: f64, eps: f64) -> Result<f64> {
        let g = self.z.grid();
        let ti = g.nearest_node(t);
        if (g.node(ti) - t).abs() > 1e-9 * g.dt() {
            return Err(Error::InvalidArgument(format!(
                "t = {t} is not a grid node"
            )));
        }
        let k = g.steps_for(eps).ok_or_else(|| {
            Error::InvalidArgument(format!("ε = {eps} is not a multiple of dt = {}", g.dt()))
        })?;
        if ti + k > g.n_steps() {
            return Err(Error::InvalidArgument(format!("ε = {eps} exceeds T - t")));
        }
        let mp = self.z.n_paths();
        let mut total = 0.0;
        for p in 0..mp {
            for j in ti..=ti + k {
                let gap: f64 = self
                    .z
                    .at(ti, p, j)
                    .iter()
                    .zip(self.diag.at(p, j))
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let wt = if j == ti || j == ti + k { 0.5 } else { 1.0 };
                total += wt * gap;
            }
        }
        Ok(total * g.dt() / mp as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropertyDRow {
    pub t: f64,
    pub eps: f64,
    pub integral: f64,
    /// `integral / ε`.
    pub average: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropertyDReport {
    pub rows: Vec<PropertyDRow>,
    /// `(t, slope of ln integral against ln ε)`; `None` when every integral is zero.
    pub slopes: Vec<(f64, Option<f64>)>,
    /// Every computed integral is exactly zero.
    pub exact_zero: bool,
    /// The ε-averages vanish: exact zero, or every slope exceeds one.
    pub holds: bool,
    /// `(t, ε)` pairs with `ε > T - t`.
    pub skipped: Vec<(f64, f64)>,
}

impl PropertyDReport {
    pub fn min_slope(&self) -> Option<f64> {
        self.slopes.iter().filter_map(|s| s.1).reduce(f64::min)
    }
}

/// Property (D) rates from any gap source.
pub fn property_d_rate_source(
    src: &dyn GapSource,
    t_set: &[f64],
    eps_set: &[f64],
) -> Result<PropertyDReport> {
    if eps_set.iter().any(|e| !(*e > 0.0)) {
        return Err(Error::InvalidArgument("ε values must be positive".into()));
    }
    let (_, hi) = src.horizon();
    let mut rows = Vec::new();
    let mut slopes = Vec::new();
    let mut skipped = Vec::new();
    for &t in t_set {
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for &eps in eps_set {
            if eps > hi - t + 1e-12 {
                skipped.push((t, eps));
                continue;
            }
            let integral = src.gap_integral(t, eps)?;
            rows.push(PropertyDRow {
                t,
                eps,
                integral,
                average: integral / eps,
            });
            xs.push(eps);
            ys.push(integral);
        }
        if !xs.is_empty() {
            let slope = if ys.iter().all(|y| *y == 0.0) {
                None
            } else {
                loglog_slope(&xs, &ys)
            };
            slopes.push((t, slope));
        }
    }
    let exact_zero = !rows.is_empty() && rows.iter().all(|r| r.integral == 0.0);
    let holds =
        exact_zero || (!slopes.is_empty() && slopes.iter().all(|(_, s)| s.is_none_or(|v| v > 1.0)));
    Ok(PropertyDReport {
        rows,
        slopes,
        exact_zero,
        holds,
        skipped,
    })
}

/// Property (D) rates of a stored field against a candidate diagonal.
pub fn property_d_rate(
    z: &BiTemporalField,
    diag: &AdaptedField,
    t_nodes: &[usize],
    eps_set: &[f64],
) -> Result<PropertyDReport> {
    if z.grid() != diag.grid() || z.n_paths() != diag.n_paths() || z.dim() != diag.dim() {
        return Err(Error::ShapeMismatch(
            "z and diag must share grid, paths and width".into(),
        ));
    }
    let ts: Vec<f64> = t_nodes
        .iter()
        .map(|&i| {
            if i < z.n_nodes() {
                Ok(z.grid().node(i))
            } else {
                Err(Error::InvalidArgument(format!("t-node {i} out of range")))
            }
        })
        .collect::<Result<_>>()?;
    property_d_rate_source(&GridGap { z, diag }, &ts, eps_set)
}
