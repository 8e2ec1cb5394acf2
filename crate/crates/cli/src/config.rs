//! Strict TOML run configuration.

use std::path::PathBuf;

use bsvie_core::control::toy::ScalarToy;
use bsvie_core::{RegressionBasis, SchemeParams, SolveOptions};
use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Simulate,
    SolveBsde,
    SolveEbsvie,
    SolveBsvie,
    Diag,
    PropertyD,
    EquilibriumCheck,
    EquilibriumSearch,
    VariationalRates,
    OracleSuite,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Self::Simulate => "simulate",
            Self::SolveBsde => "solve-bsde",
            Self::SolveEbsvie => "solve-ebsvie",
            Self::SolveBsvie => "solve-bsvie",
            Self::Diag => "diag",
            Self::PropertyD => "property-d",
            Self::EquilibriumCheck => "equilibrium-check",
            Self::EquilibriumSearch => "equilibrium-search",
            Self::VariationalRates => "variational-rates",
            Self::OracleSuite => "oracle-suite",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub command: Option<Command>,
    pub output_dir: Option<PathBuf>,
    pub grid: GridConfig,
    pub ensemble: EnsembleConfig,
    pub solver: SolverConfig,
    pub problem: ProblemConfig,
    pub property_d: PropertyDConfig,
    pub control: ControlConfig,
    pub variational: VariationalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub s_lo: f64,
    pub s_hi: f64,
    pub n: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            s_lo: 0.0,
            s_hi: 1.0,
            n: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleConfig {
    pub m: usize,
    pub d: usize,
    pub seed: u64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            m: 1000,
            d: 1,
            seed: 7,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BasisChoice {
    Brownian,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub basis: BasisChoice,
    pub degree: usize,
    /// Scheme weight; `None` keeps the command's default scheme.
    pub theta: Option<f64>,
    pub corrections: Option<usize>,
    pub beta: Option<f64>,
    pub tol: f64,
    pub max_iter: usize,
    pub tol_h: Option<f64>,
    pub damping: Option<f64>,
    pub max_rounds: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let so = SolveOptions::default();
        Self {
            basis: BasisChoice::Brownian,
            degree: 2,
            theta: None,
            corrections: None,
            beta: None,
            tol: so.tol,
            max_iter: so.max_iter,
            tol_h: None,
            damping: None,
            max_rounds: 10,
        }
    }
}

impl SolverConfig {
    pub fn basis(&self) -> RegressionBasis {
        match self.basis {
            BasisChoice::Brownian => RegressionBasis::brownian(self.degree),
            BasisChoice::Constant => RegressionBasis::constant(),
        }
    }

    /// Solver settings on top of `base`, the command's default.
    pub fn solve_options(&self, base: SolveOptions) -> SolveOptions {
        SolveOptions {
            basis: self.basis(),
            scheme: SchemeParams {
                theta: self.theta.unwrap_or(base.scheme.theta),
                inner_corrections: self.corrections.unwrap_or(base.scheme.inner_corrections),
            },
            beta: self.beta,
            tol: self.tol,
            max_iter: self.max_iter,
            ..base
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProblemConfig {
    /// An oracle id (`O1`..`O6`) or a built-in problem name.
    pub name: String,
    pub a: f64,
    pub r: f64,
    pub scale: f64,
    /// Field overrides applied to a control toy.
    pub toy: Option<toml::Table>,
}

impl Default for ProblemConfig {
    fn default() -> Self {
        Self {
            name: "O3".into(),
            a: 0.5,
            r: 2.0,
            scale: 1.0,
            toy: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PropertyDConfig {
    /// Absolute ε values; when empty, `eps_steps · dt` is used.
    pub eps: Vec<f64>,
    pub eps_steps: Vec<usize>,
    /// t-nodes for solver fields; analytic sources use `t_values`.
    pub t_nodes: Vec<usize>,
    pub t_values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlConfig {
    /// Control index of the constant policy to check or to start from.
    pub policy: usize,
    pub cost_paths: usize,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            policy: 0,
            cost_paths: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VariationalConfig {
    pub tau_node: Option<usize>,
    pub control: usize,
    pub eps_steps: Vec<usize>,
}

impl Default for VariationalConfig {
    fn default() -> Self {
        Self {
            tau_node: None,
            control: 1,
            eps_steps: vec![8, 16, 32, 64],
        }
    }
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| bad(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let g = &self.grid;
        if !(g.s_lo.is_finite() && g.s_hi.is_finite() && g.s_hi > g.s_lo) {
            return Err(bad("grid: need finite s_lo < s_hi"));
        }
        if !(1..=4096).contains(&g.n) {
            return Err(bad("grid.n must be in 1..=4096"));
        }
        let e = &self.ensemble;
        if !(1..=10_000_000).contains(&e.m) || !(1..=16).contains(&e.d) {
            return Err(bad("ensemble: m in 1..=1e7, d in 1..=16"));
        }
        let s = &self.solver;
        if s.degree > 8 {
            return Err(bad("solver.degree must be at most 8"));
        }
        if s.theta.is_some_and(|t| !(t > 0.0 && t <= 1.0)) {
            return Err(bad("solver.theta must be in (0, 1]"));
        }
        if !(s.tol > 0.0) || s.max_iter == 0 || s.max_rounds == 0 {
            return Err(bad("solver: tol > 0, max_iter > 0, max_rounds > 0"));
        }
        if s.beta.is_some_and(|b| !(b >= 0.0 && b.is_finite())) {
            return Err(bad("solver.beta must be finite and >= 0"));
        }
        if s.tol_h.is_some_and(|t| !(t > 0.0)) {
            return Err(bad("solver.tol_h must be > 0"));
        }
        if s.damping.is_some_and(|d| !(d > 0.0 && d < 1.0)) {
            return Err(bad("solver.damping must be in (0, 1)"));
        }
        let p = &self.problem;
        if !p.a.is_finite() || !p.scale.is_finite() || !(p.r > 1.0) {
            return Err(bad("problem: finite a and scale, r > 1"));
        }
        let pd = &self.property_d;
        if pd.eps.iter().any(|e| !(*e > 0.0)) || pd.eps_steps.contains(&0) {
            return Err(bad("property_d: ε values must be positive"));
        }
        if self.variational.eps_steps.contains(&0) || self.control.cost_paths == 0 {
            return Err(bad("variational: positive eps_steps and cost_paths"));
        }
        Ok(())
    }

    /// The control toy named by `problem`, with overrides applied.
    pub fn toy(&self) -> Result<ScalarToy, CliError> {
        let p = &self.problem;
        let base = match p.name.to_ascii_lowercase().as_str() {
            "o6" | "quadratic" => ScalarToy::quadratic(),
            "linear-state" => ScalarToy::linear_state(p.a),
            "discounted" => ScalarToy::discounted(1.0, 0.5, 1.0),
            "variational" => ScalarToy::variational(),
            other => return Err(bad(format!("`{other}` is not a control problem"))),
        };
        let Some(over) = &p.toy else {
            return Ok(base);
        };
        let mut table = toml::Table::try_from(&base).map_err(|e| bad(e.to_string()))?;
        for (k, v) in over {
            table.insert(k.clone(), v.clone());
        }
        let toy: ScalarToy = table
            .try_into()
            .map_err(|e: toml::de::Error| bad(e.to_string()))?;
        if toy.controls.is_empty() || !(toy.t1 > toy.t0) {
            return Err(bad("problem.toy: need controls and t0 < t1"));
        }
        Ok(toy)
    }
}
