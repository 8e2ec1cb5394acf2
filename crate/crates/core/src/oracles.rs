//! Reference problems with closed-form solutions.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::bsde::Cell;
use crate::ebsvie::{EbsvieSpec, FnEbsvie, GapSource};
use crate::error::{Error, Result};
use crate::fields::{AdaptedField, BiTemporalField};
use crate::grid::{PathEnsemble, PathRole, PathSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OracleId {
    O1,
    O2,
    O3,
    O4,
    O5,
    O6,
}

impl fmt::Display for OracleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl std::str::FromStr for OracleId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "O1" => Ok(Self::O1),
            "O2" => Ok(Self::O2),
            "O3" => Ok(Self::O3),
            "O4" => Ok(Self::O4),
            "O5" => Ok(Self::O5),
            "O6" => Ok(Self::O6),
            _ => Err(Error::InvalidArgument(format!("unknown oracle `{s}`"))),
        }
    }
}

/// Scalar closed form evaluated at `(cell.t, cell.s)` on `cell.path`.
pub type ClosedFn = Arc<dyn Fn(&Cell, &PathSet) -> f64 + Send + Sync>;

/// Closed forms of a scalar EBSVIE oracle. `eta` reads `cell.s` as its time.
#[derive(Clone, Default)]
pub struct ClosedForm {
    pub y: Option<ClosedFn>,
    pub z: Option<ClosedFn>,
    pub eta: Option<ClosedFn>,
    pub diag: Option<ClosedFn>,
    pub dy: Option<ClosedFn>,
    pub dz: Option<ClosedFn>,
}

/// Expected error bound at a given resolution. `m = None` means any path count.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tolerance {
    pub n: usize,
    pub m: Option<usize>,
    pub max_error: f64,
}

/// `Z₁(t,s) = (s-t)^{-1/r}` for `s > t`, zero otherwise; its candidate diagonal is zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagonalCounterexample {
    pub r: f64,
    pub s_lo: f64,
    pub s_hi: f64,
}

impl DiagonalCounterexample {
    pub fn new(r: f64, s_lo: f64, s_hi: f64) -> Result<Self> {
        if !(r > 1.0) || !(s_hi > s_lo) {
            return Err(Error::InvalidArgument(format!(
                "need r > 1 and S < T, got r = {r}"
            )));
        }
        Ok(Self { r, s_lo, s_hi })
    }

    pub fn z1(&self, t: f64, s: f64) -> f64 {
        if s > t {
            (s - t).powf(-1.0 / self.r)
        } else {
            0.0
        }
    }

    /// `∫_t^{t+ε} Z₁(t,s) ds` from the antiderivative.
    pub fn integral(&self, eps: f64) -> f64 {
        let r = self.r;
        r / (r - 1.0) * eps.powf(1.0 - 1.0 / r)
    }

    /// `(1/ε) ∫_t^{t+ε} Z₁(t,s) ds = r/(r-1) · ε^{-1/r}`.
    pub fn epsilon_average(&self, eps: f64) -> f64 {
        self.integral(eps) / eps
    }
}

impl GapSource for DiagonalCounterexample {
    fn horizon(&self) -> (f64, f64) {
        (self.s_lo, self.s_hi)
    }

    fn gap_integral(&self, t: f64, eps: f64) -> Result<f64> {
        if t < self.s_lo || t + eps > self.s_hi + 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "[{t}, {t}+{eps}] leaves the horizon"
            )));
        }
        Ok(self.integral(eps))
    }
}

#[derive(Clone)]
pub enum OracleKind {
    Ebsvie(Arc<FnEbsvie>),
    Analytic(DiagonalCounterexample),
    Control(crate::control::toy::ControlOracle),
}

#[derive(Clone)]
pub struct OracleProblem {
    pub id: OracleId,
    pub name: &'static str,
    pub kind: OracleKind,
    pub closed_form: ClosedForm,
    pub tolerances: Vec<Tolerance>,
}

impl fmt::Debug for OracleProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OracleProblem")
            .field("id", &self.id)
            .field("name", &self.name)
            .finish()
    }
}

fn cf(f: impl Fn(&Cell, &PathSet) -> f64 + Send + Sync + 'static) -> Option<ClosedFn> {
    Some(Arc::new(f))
}

fn zero_deriv(spec: FnEbsvie) -> FnEbsvie {
    spec.with_derivatives(
        |_, _, o| o.fill(0.0),
        |_, _, _, _, _, o| o.fill(0.0),
        |_, _, _, _, _, o| o.fill(0.0),
        |_, _, _, _, _, o| o.fill(0.0),
    )
}

/// ψ ≡ 0, g ≡ 0.
pub fn o1_zero() -> OracleProblem {
    let spec = zero_deriv(
        FnEbsvie::new(1, 1, |_, _, o| o[0] = 0.0, |_, _, _, _, _, o| o[0] = 0.0).independent_of_y(),
    );
    let zero = || cf(|_, _| 0.0);
    OracleProblem {
        id: OracleId::O1,
        name: "zero problem",
        kind: OracleKind::Ebsvie(Arc::new(spec)),
        closed_form: ClosedForm {
            y: zero(),
            z: zero(),
            eta: zero(),
            diag: zero(),
            dy: zero(),
            dz: zero(),
        },
        tolerances: vec![Tolerance {
            n: 16,
            m: None,
            max_error: 1e-14,
        }],
    }
}

/// ψ(t) = t·W(T), g ≡ 0: `Y = t·W(s)`, `Z = t`, `Diag[Z](s) = s`.
pub fn o2_martingale() -> OracleProblem {
    let spec = FnEbsvie::new(
        1,
        1,
        |c, p, o| o[0] = c.t * p.brownian(c.path, c.s_idx, 0),
        |_, _, _, _, _, o| o[0] = 0.0,
    )
    .with_lipschitz(0.0)
    .independent_of_y()
    .with_derivatives(
        |c, p, o| o[0] = p.brownian(c.path, c.s_idx, 0),
        |_, _, _, _, _, o| o[0] = 0.0,
        |_, _, _, _, _, o| o[0] = 0.0,
        |_, _, _, _, _, o| o[0] = 0.0,
    );
    OracleProblem {
        id: OracleId::O2,
        name: "martingale problem",
        kind: OracleKind::Ebsvie(Arc::new(spec)),
        closed_form: ClosedForm {
            y: cf(|c, p| c.t * p.brownian(c.path, c.s_idx, 0)),
            z: cf(|c, _| c.t),
            eta: cf(|c, p| c.s * p.brownian(c.path, c.s_idx, 0)),
            diag: cf(|c, _| c.s),
            dy: cf(|c, p| p.brownian(c.path, c.s_idx, 0)),
            dz: cf(|_, _| 1.0),
        },
        tolerances: vec![Tolerance {
            n: 32,
            m: Some(10_000),
            max_error: 0.05,
        }],
    }
}

/// ψ ≡ 1, g = a·η: `Y(t,s) = e^{a(T-s)}`, `Z ≡ 0`.
pub fn o3_volterra(a: f64, s_hi: f64) -> OracleProblem {
    let spec = zero_deriv(
        FnEbsvie::new(
            1,
            1,
            |_, _, o| o[0] = 1.0,
            move |_, eta, _, _, _, o| o[0] = a * eta[0],
        )
        .with_lipschitz(a.abs())
        .independent_of_y(),
    );
    OracleProblem {
        id: OracleId::O3,
        name: "deterministic Volterra",
        kind: OracleKind::Ebsvie(Arc::new(spec)),
        closed_form: ClosedForm {
            y: cf(move |c, _| (a * (s_hi - c.s)).exp()),
            z: cf(|_, _| 0.0),
            eta: cf(move |c, _| (a * (s_hi - c.s)).exp()),
            diag: cf(|_, _| 0.0),
            dy: cf(|_, _| 0.0),
            dz: cf(|_, _| 0.0),
        },
        tolerances: vec![Tolerance {
            n: 64,
            m: None,
            max_error: 1e-3,
        }],
    }
}

/// ψ ≡ 1, g = a·y: `y(s) = e^{a(T-s)}`, `z ≡ 0`.
pub fn o4_exponential(a: f64, s_hi: f64) -> OracleProblem {
    let spec = FnEbsvie::new(
        1,
        1,
        |_, _, o| o[0] = 1.0,
        move |_, _, y, _, _, o| o[0] = a * y[0],
    )
    .with_lipschitz(a.abs())
    .with_derivatives(
        |_, _, o| o[0] = 0.0,
        |_, _, _, _, _, o| o[0] = 0.0,
        move |_, _, _, _, _, o| o[0] = a,
        |_, _, _, _, _, o| o[0] = 0.0,
    );
    OracleProblem {
        id: OracleId::O4,
        name: "scalar BSDE exponential",
        kind: OracleKind::Ebsvie(Arc::new(spec)),
        closed_form: ClosedForm {
            y: cf(move |c, _| (a * (s_hi - c.s)).exp()),
            z: cf(|_, _| 0.0),
            eta: cf(move |c, _| (a * (s_hi - c.s)).exp()),
            diag: cf(|_, _| 0.0),
            dy: cf(|_, _| 0.0),
            dz: cf(|_, _| 0.0),
        },
        tolerances: vec![Tolerance {
            n: 64,
            m: None,
            max_error: 1e-3,
        }],
    }
}

/// The analytic field `(s-t)^{-1/r}` on `[0, 1]`.
pub fn o5_counterexample(r: f64) -> Result<OracleProblem> {
    Ok(OracleProblem {
        id: OracleId::O5,
        name: "diagonal counterexample",
        kind: OracleKind::Analytic(DiagonalCounterexample::new(r, 0.0, 1.0)?),
        closed_form: ClosedForm {
            z: cf(move |c, _| {
                if c.s > c.t {
                    (c.s - c.t).powf(-1.0 / r)
                } else {
                    0.0
                }
            }),
            ..ClosedForm::default()
        },
        tolerances: vec![Tolerance {
            n: 0,
            m: None,
            max_error: 1e-9,
        }],
    })
}

/// The control toy with `b = u`, `σ ≡ 1`, `f = u²`, `h ≡ 0`, `U = {-1, 0, 1}`.
pub fn o6_control() -> OracleProblem {
    OracleProblem {
        id: OracleId::O6,
        name: "control toy",
        kind: OracleKind::Control(crate::control::toy::ControlOracle::quadratic()),
        closed_form: ClosedForm::default(),
        tolerances: vec![Tolerance {
            n: 32,
            m: Some(2_000),
            max_error: 0.02,
        }],
    }
}

/// O1 to O6 with default parameters (a = 0.5, T = 1, r = 2).
pub fn oracle_suite() -> Vec<OracleProblem> {
    vec![
        o1_zero(),
        o2_martingale(),
        o3_volterra(0.5, 1.0),
        o4_exponential(0.5, 1.0),
        o5_counterexample(2.0).expect("r = 2 is valid"),
        o6_control(),
    ]
}

/// Accumulated residual of the closed form in the discrete equation,
/// `max_{t,k} Ê|Σ_{i≥k} [Y_i - Y_{i+1} - ½dt(g_i + g_{i+1}) + Z_i ΔW_i]|²^{1/2}`
/// over `s_k ≥ t`. `None` for oracles without `y`, `z` and `eta`.
pub fn discretisation_residual(oracle: &OracleProblem, ens: &PathEnsemble) -> Option<f64> {
    let OracleKind::Ebsvie(spec) = &oracle.kind else {
        return None;
    };
    let cfm = &oracle.closed_form;
    let (y, z, eta) = (cfm.y.as_ref()?, cfm.z.as_ref()?, cfm.eta.as_ref()?);
    let g = ens.grid();
    let n = g.n_steps();
    let paths = ens.primary();
    let cell = |ti: usize, si: usize, p: usize| Cell {
        t_idx: ti,
        t: g.node(ti),
        s_idx: si,
        s: g.node(si),
        path: p,
        role: PathRole::Primary,
    };
    let gen = |ti: usize, si: usize, p: usize| {
        let c = cell(ti, si, p);
        let mut out = [0.0];
        spec.generator(
            &c,
            &[eta(&cell(si, si, p), paths)],
            &[y(&c, paths)],
            &[z(&c, paths)],
            paths,
            &mut out,
        );
        out[0]
    };
    let mut worst: f64 = 0.0;
    for ti in 0..=n {
        let mut acc = vec![0.0; n + 1];
        for p in 0..ens.n_paths() {
            let mut run = 0.0;
            for i in (ti..n).rev() {
                let (c0, c1) = (cell(ti, i, p), cell(ti, i + 1, p));
                run += y(&c0, paths)
                    - y(&c1, paths)
                    - 0.5 * g.dt() * (gen(ti, i, p) + gen(ti, i + 1, p))
                    + z(&c0, paths) * paths.increment(p, i, 0);
                acc[i] += run * run;
            }
        }
        for v in acc {
            worst = worst.max((v / ens.n_paths() as f64).sqrt());
        }
    }
    Some(worst)
}

/// Result of checking one oracle at its own tolerance profile.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleOutcome {
    pub id: OracleId,
    pub name: String,
    pub n: usize,
    pub m: usize,
    /// `(quantity, error)` for each compared quantity.
    pub errors: Vec<(String, f64)>,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Max over cells (`s ≥ t` only) of the path-RMS distance to `want`.
pub fn bitemporal_error(f: &BiTemporalField, want: &ClosedFn, ens: &PathEnsemble, k: usize) -> f64 {
    let g = ens.grid();
    let paths = ens.primary();
    let nn = f.n_nodes();
    let mut worst: f64 = 0.0;
    for t in 0..nn {
        for s in t..nn {
            let ms = (0..f.n_paths())
                .map(|p| {
                    let c = grid_cell(g, t, s, p);
                    (f.get(t, p, s, k) - want(&c, paths)).powi(2)
                })
                .sum::<f64>()
                / f.n_paths() as f64;
            worst = worst.max(ms.sqrt());
        }
    }
    worst
}

/// Max over nodes of the path-RMS distance to `want`, read with `t = s`.
pub fn adapted_error(f: &AdaptedField, want: &ClosedFn, ens: &PathEnsemble) -> f64 {
    let g = ens.grid();
    let paths = ens.primary();
    let mut worst: f64 = 0.0;
    for j in 0..f.n_nodes() {
        let ms = (0..f.n_paths())
            .map(|p| (f.get(p, j, 0) - want(&grid_cell(g, j, j, p), paths)).powi(2))
            .sum::<f64>()
            / f.n_paths() as f64;
        worst = worst.max(ms.sqrt());
    }
    worst
}

fn grid_cell(g: &crate::grid::TimeGrid, t: usize, s: usize, path: usize) -> Cell {
    Cell {
        t_idx: t,
        t: g.node(t),
        s_idx: s,
        s: g.node(s),
        path,
        role: PathRole::Primary,
    }
}

/// ε values of the analytic Property (D) check.
pub const COUNTEREXAMPLE_EPS: [f64; 3] = [0.04, 0.02, 0.01];

/// Solves `oracle` at its tolerance profile and compares with the closed form.
/// Equation oracles without a fixed path count use 16 paths.
pub fn verify_oracle(oracle: &OracleProblem, seed: u64) -> Result<OracleOutcome> {
    let tol =
        oracle.tolerances.first().copied().ok_or_else(|| {
            Error::InvalidArgument(format!("{} has no tolerance profile", oracle.id))
        })?;
    let mut errors = Vec::new();
    let (n, m) = match &oracle.kind {
        OracleKind::Ebsvie(spec) => {
            let m = tol.m.unwrap_or(16);
            let grid = crate::grid::make_grid(0.0, 1.0, tol.n)?;
            let ens = crate::grid::simulate_paths(&grid, m, 1, seed)?;
            let opts = crate::ebsvie::SolveOptions {
                basis: crate::bsde::RegressionBasis::brownian(1),
                ..Default::default()
            };
            let sol = crate::ebsvie::solve_ebsvie(spec.as_ref(), &ens, &opts)?;
            let cfm = &oracle.closed_form;
            for (name, f) in [("y", &cfm.y), ("z", &cfm.z)] {
                if let Some(f) = f {
                    let field = if name == "y" { &sol.y } else { &sol.z };
                    errors.push((name.to_string(), bitemporal_error(field, f, &ens, 0)));
                }
            }
            if let Some(f) = &cfm.eta {
                errors.push(("eta".into(), adapted_error(&sol.eta, f, &ens)));
            }
            if spec.derivatives().is_some() {
                let der = crate::ebsvie::solve_derivative_ebsvie(spec.as_ref(), &ens, &sol, &opts)?;
                if let Some(f) = &cfm.dy {
                    errors.push(("dy".into(), bitemporal_error(&der.dy, f, &ens, 0)));
                }
                if let Some(f) = &cfm.dz {
                    errors.push(("dz".into(), bitemporal_error(&der.dz, f, &ens, 0)));
                }
                if let Some(f) = &cfm.diag {
                    let d = crate::ebsvie::compute_diag(&sol.z, &der.dz)?;
                    errors.push(("diag".into(), adapted_error(&d, f, &ens)));
                }
            }
            if !sol.report.converged {
                errors.push(("final_delta".into(), f64::INFINITY));
            }
            (tol.n, m)
        }
        OracleKind::Analytic(dc) => {
            let r = dc.r;
            for eps in COUNTEREXAMPLE_EPS {
                let want = r / (r - 1.0) * eps.powf(-1.0 / r);
                errors.push((
                    format!("average@{eps}"),
                    (dc.epsilon_average(eps) - want).abs(),
                ));
            }
            let rep = crate::ebsvie::property_d_rate_source(dc, &[dc.s_lo], &COUNTEREXAMPLE_EPS)?;
            // the oracle exists to make the check fail
            errors.push((
                "property_d_holds".into(),
                if rep.holds { f64::INFINITY } else { 0.0 },
            ));
            (0, 0)
        }
        OracleKind::Control(co) => {
            let m = tol.m.unwrap_or(2_000);
            let grid = crate::grid::make_grid(co.problem.t0, co.problem.t1, tol.n)?;
            let ens = crate::grid::simulate_paths(&grid, m, 1, seed)?;
            let idx = co.equilibrium.ok_or_else(|| {
                Error::InvalidArgument(format!("{} has no known equilibrium", oracle.id))
            })?;
            let pol = crate::control::ControlPolicy::constant(&ens, idx);
            let chk = crate::control::check_equilibrium(
                &co.problem,
                &pol,
                &ens,
                &crate::control::ControlOptions::default(),
            )?;
            let horizon = co.problem.t1 - co.problem.t0;
            errors.push(("violation_measure".into(), chk.violation_measure / horizon));
            (tol.n, m)
        }
    };
    let max_error = errors.iter().map(|e| e.1).fold(0.0, f64::max);
    Ok(OracleOutcome {
        id: oracle.id,
        name: oracle.name.to_string(),
        n,
        m,
        errors,
        max_error,
        tolerance: tol.max_error,
        passed: max_error <= tol.max_error,
    })
}
