//! One function per command. Each writes its CSVs and `report.toml`.

use std::path::Path;

use bsvie_core::bsde::FnBsde;
use bsvie_core::control::toy::ScalarToy;
use bsvie_core::ebsvie::{property_d_rate_source, PropertyDReport};
use bsvie_core::io::{write_adapted, write_bitemporal, write_table, CsvMeta};
use bsvie_core::oracles::{
    adapted_error, bitemporal_error, o1_zero, o2_martingale, o3_volterra, o4_exponential,
    o5_counterexample, verify_oracle, OracleKind, COUNTEREXAMPLE_EPS,
};
use bsvie_core::{
    check_equilibrium, compute_diag, make_grid, oracle_suite, property_d_rate, search_equilibrium,
    simulate_paths, solve_bsde, solve_derivative_ebsvie, solve_ebsvie, solve_type1_bsvie,
    variational_rates, AdaptedField, ControlOptions, ControlPolicy, EquilibriumBundle, OracleId,
    OracleProblem, PathEnsemble, PathRole, SearchOptions, SolveOptions, SolveReport, Spike,
};
use serde::Serialize;

use crate::config::{Command, RunConfig};
use crate::output::{gnuplot_script, sha256_hex, Manifest, OracleStatus, RunOutput};
use crate::CliError;

/// What a command reports back besides its files.
#[derive(Default)]
struct Outcome {
    /// A solver or search that did not converge.
    not_converged: Option<String>,
    /// Checks that failed outright.
    failed: Option<String>,
    oracles: Vec<OracleStatus>,
}

pub fn execute(
    command: Command,
    cfg: &RunConfig,
    dir: &Path,
    strict: bool,
) -> Result<(), CliError> {
    let mut out = RunOutput::create(dir)?;
    let outcome = match command {
        Command::Simulate => simulate(cfg, &mut out),
        Command::SolveBsde => solve_bsde_cmd(cfg, &mut out),
        Command::SolveEbsvie => solve_ebsvie_cmd(cfg, &mut out),
        Command::SolveBsvie => solve_bsvie_cmd(cfg, &mut out),
        Command::Diag => diag_cmd(cfg, &mut out),
        Command::PropertyD => property_d_cmd(cfg, &mut out),
        Command::EquilibriumCheck => equilibrium_check_cmd(cfg, &mut out),
        Command::EquilibriumSearch => equilibrium_search_cmd(cfg, &mut out),
        Command::VariationalRates => variational_cmd(cfg, &mut out),
        Command::OracleSuite => oracle_suite_cmd(cfg, &mut out),
    };
    let (status, result, oracles) = match outcome {
        Ok(o) => match (o.failed, o.not_converged) {
            (Some(f), _) => ("checks-failed", Err(CliError::ChecksFailed(f)), o.oracles),
            (None, Some(nc)) if strict => {
                ("not-converged", Err(CliError::NotConverged(nc)), o.oracles)
            }
            (None, Some(_)) => ("ok-not-converged", Ok(()), o.oracles),
            (None, None) => ("ok", Ok(()), o.oracles),
        },
        Err(e) => (e.category(), Err(e), Vec::new()),
    };
    let normalized = toml::to_string(cfg).map_err(|e| CliError::Internal(e.to_string()))?;
    out.write_manifest(&Manifest {
        command: command.name().to_string(),
        config_sha256: sha256_hex(normalized.as_bytes()),
        seed: cfg.ensemble.seed,
        threads: rayon::current_num_threads(),
        status: status.to_string(),
        files: out.files.clone(),
        stages: out.stages.clone(),
        oracles,
    })?;
    result
}

fn ensemble(cfg: &RunConfig, out: &mut RunOutput) -> Result<PathEnsemble, CliError> {
    let g = make_grid(cfg.grid.s_lo, cfg.grid.s_hi, cfg.grid.n)?;
    let e = &cfg.ensemble;
    Ok(out.stage("simulate", || simulate_paths(&g, e.m, e.d, e.seed))?)
}

fn meta(name: &str, ens: &PathEnsemble) -> CsvMeta {
    CsvMeta::new(name)
        .with_grid(ens.grid())
        .with_seed(ens.seed())
}

/// Number of lines before the first data row of a file written with `meta`.
fn header_lines(meta: &CsvMeta) -> usize {
    3 + usize::from(meta.grid.is_some()) + usize::from(meta.seed.is_some())
}

/// An equation oracle by id with the configured parameters.
fn equation_oracle(cfg: &RunConfig, allowed: &[OracleId]) -> Result<OracleProblem, CliError> {
    let id: OracleId = cfg
        .problem
        .name
        .parse()
        .map_err(|e: bsvie_core::Error| CliError::Config(e.to_string()))?;
    if !allowed.contains(&id) {
        return Err(CliError::Config(format!(
            "problem {id} is not available for this command (choose from {allowed:?})"
        )));
    }
    let (a, t) = (cfg.problem.a, cfg.grid.s_hi);
    Ok(match id {
        OracleId::O1 => o1_zero(),
        OracleId::O2 => o2_martingale(),
        OracleId::O3 => o3_volterra(a, t),
        OracleId::O4 => o4_exponential(a, t),
        OracleId::O5 => o5_counterexample(cfg.problem.r)?,
        OracleId::O6 => bsvie_core::oracles::o6_control(),
    })
}

fn spec_of(o: &OracleProblem) -> &bsvie_core::ebsvie::FnEbsvie {
    match &o.kind {
        OracleKind::Ebsvie(s) => s.as_ref(),
        _ => unreachable!("equation oracles only"),
    }
}

#[derive(Serialize)]
struct SolveSummary {
    iterations: usize,
    beta: f64,
    beta_capped: bool,
    ratios: Vec<f64>,
    deltas: Vec<f64>,
    final_delta: f64,
    converged: bool,
}

impl From<&SolveReport> for SolveSummary {
    fn from(r: &SolveReport) -> Self {
        Self {
            iterations: r.picard_iterations,
            beta: r.beta_used,
            beta_capped: r.beta_capped,
            ratios: r.contraction_ratios.clone(),
            deltas: r.deltas.clone(),
            final_delta: r.final_delta,
            converged: r.converged,
        }
    }
}

fn not_converged(r: &SolveReport) -> Option<String> {
    (!r.converged).then(|| {
        format!(
            "Picard iteration stopped after {} sweeps at delta {:.3e}",
            r.picard_iterations, r.final_delta
        )
    })
}

#[derive(Serialize)]
struct SimulateReport {
    n_paths: usize,
    dim: usize,
    n_steps: usize,
    dt: f64,
    increment_variance: f64,
    terminal_variance: f64,
}

fn variance(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len().max(2) - 1) as f64
}

fn simulate(cfg: &RunConfig, out: &mut RunOutput) -> Result<Outcome, CliError> {
    let ens = ensemble(cfg, out)?;
    let w = AdaptedField::brownian(&ens, PathRole::Primary);
    out.write_with("brownian.csv", |b| write_adapted(b, &meta("W", &ens), &w))?;
    let n = ens.grid().n_steps();
    out.write_report(
        "report.toml",
        &SimulateReport {
            n_paths: ens.n_paths(),
            dim: ens.dim(),
            n_steps: n,
            dt: ens.grid().dt(),
            increment_variance: variance(ens.primary().increments().iter().copied()),
            terminal_variance: variance((0..ens.n_paths()).map(|p| w.get(p, n, 0))),
        },
    )?;
    Ok(Outcome::default())
}

/// Closed-form value by `(path, node)`.
type PathFn = Box<dyn Fn(usize, usize) -> f64>;

#[derive(Serialize)]
struct BsdeReport {
    problem: String,
    y_error: f64,
    z_error: f64,
}

fn solve_bsde_cmd(cfg: &RunConfig, out: &mut RunOutput) -> Result<Outcome, CliError> {
    let ens = ensemble(cfg, out)?;
    let (a, sc, t1) = (cfg.problem.a, cfg.problem.scale, cfg.grid.s_hi);
    let name = cfg.problem.name.to_ascii_lowercase();
    let nodes = ens.grid().nodes().to_vec();
    let paths = ens.primary().clone();
    let (spec, y_want, z_want): (FnBsde, PathFn, f64) = match name.as_str() {
        "o4" | "exponential" => (
            FnBsde::new(
                1,
                1,
                |_, _, o| o[0] = 1.0,
                move |_, y, _, _, o| o[0] = a * y[0],
            ),
            Box::new(move |_, j| (a * (t1 - nodes[j])).exp()),
            0.0,
        ),
        "brownian" => (
            FnBsde::new(
                1,
                1,
                move |c, p, o| o[0] = sc * p.brownian(c.path, c.s_idx, 0),
                |_, _, _, _, o| o[0] = 0.0,
            ),
            Box::new(move |p, j| sc * paths.brownian(p, j, 0)),
            sc,
        ),
        other => {
            return Err(CliError::Config(format!(
                "solve-bsde problems are `exponential` (O4) and `brownian`, not `{other}`"
            )))
        }
    };
    let basis = cfg.solver.basis();
    let sol = out.stage("solve", || solve_bsde(&spec, &ens, &basis))?;
    let (y, z) = (&sol.y.primary, &sol.z.primary);
    out.write_with("y.csv", |b| write_adapted(b, &meta("y", &ens), y))?;
    out.write_with("z.csv", |b| write_adapted(b, &meta("z", &ens), z))?;
    let rms = |f: &AdaptedField, want: &dyn Fn(usize, usize) -> f64, last: usize| {
        (0..=last)
            .map(|j| {
                let ms = (0..f.n_paths())
                    .map(|p| (f.get(p, j, 0) - want(p, j)).powi(2))
                    .sum::<f64>()
                    / f.n_paths() as f64;
                ms.sqrt()
            })
            .fold(0.0, f64::max)
    };
    let n = ens.grid().n_steps();
    out.write_report(
        "report.toml",
        &BsdeReport {
            problem: name,
            y_error: rms(y, y_want.as_ref(), n),
            z_error: rms(z, &|_, _| z_want, n - 1),
        },
    )?;
    Ok(Outcome::default())
}

#[derive(Serialize)]
struct EbsvieReport {
    problem: String,
    #[serde(flatten)]
    solve: SolveSummary,
    errors: Vec<(String, f64)>,
    max_error: f64,
}

fn max_of(errors: &[(String, f64)]) -> f64 {
    errors.iter().map(|e| e.1).fold(0.0, f64::max)
}

fn solve_ebsvie_cmd(cfg: &RunConfig, out: &mut RunOutput) -> Result<Outcome, CliError> {
    use OracleId::*;
    let o = equation_oracle(cfg, &[O1, O2, O3, O4])?;
    let ens = ensemble(cfg, out)?;
    let opts = cfg.solver.solve_options(SolveOptions::default());
    let sol = out.stage("solve", || solve_ebsvie(spec_of(&o), &ens, &opts))?;
    out.write_with("y.csv", |b| {
        write_bitemporal(b, &meta("y", &ens), &sol.y, true)
    })?;
    out.write_with("z.csv", |b| {
        write_bitemporal(b, &meta("z", &ens), &sol.z, true)
    })?;
    out.write_with("eta.csv", |b| {
        write_adapted(b, &meta("eta", &ens), &sol.eta)
    })?;
    let cf = &o.closed_form;
    let mut errors = Vec::new();
    if let Some(f) = &cf.y {
        errors.push(("y".into(), bitemporal_error(&sol.y, f, &ens, 0)));
    }
    if let Some(f) = &cf.z {
        errors.push(("z".into(), bitemporal_error(&sol.z, f, &ens, 0)));
    }
    if let Some(f) = &cf.eta {
        errors.push(("eta".into(), adapted_error(&sol.eta, f, &ens)));
    }
    out.write_report(
        "report.toml",
        &EbsvieReport {
            problem: o.id.to_string(),
            solve: (&sol.report).into(),
            max_error: max_of(&errors),
            errors,
        },
    )?;
    Ok(Outcome {
        not_converged: not_converged(&sol.report),
        ..Outcome::default()
    })
}

fn solve_bsvie_cmd(cfg: &RunConfig, out: &mut RunOutput) -> Result<Outcome, CliError> {
    use OracleId::*;
    let o = equation_oracle(cfg, &[O1, O2, O3])?;
    let ens = ensemble(cfg, out)?;
    let opts = cfg.solver.solve_options(SolveOptions::default());
    let sol = out.stage("solve", || solve_type1_bsvie(spec_of(&o), &ens, &opts))?;
    out.write_with("eta.csv", |b| {
        write_adapted(b, &meta("eta", &ens), &sol.eta)
    })?;
    out.write_with("zeta.csv", |b| {
        write_bitemporal(b, &meta("zeta", &ens), &sol.zeta, true)
    })?;
    let mut errors = Vec::new();
    if let Some(f) = &o.closed_form.eta {
        errors.push(("eta".into(), adapted_error(&sol.eta, f, &ens)));
    }
    if let Some(f) = &o.closed_form.z {
        errors.push(("zeta".into(), bitemporal_error(&sol.zeta, f, &ens, 0)));
    }
    out.write_report(
        "report.toml",
        &EbsvieReport {
            problem: o.id.to_string(),
            solve: (&sol.report).into(),
            max_error: max_of(&errors),
            errors,
        },
    )?;
    Ok(Outcome {
        not_converged: not_converged(&sol.report),
        ..Outcome::default()
    })
}

struct DiagRun {
    ens: PathEnsemble,
    z: bsvie_core::BiTemporalField,
    diag: AdaptedField,
    report: SolveReport,
    errors: Vec<(String, f64)>,
}

fn run_diag(cfg: &RunConfig, out: &mut RunOutput, o: &OracleProblem) -> Result<DiagRun, CliError> {
    let ens = ensemble(cfg, out)?;
    let opts = cfg.solver.solve_options(SolveOptions::default());
    let spec = spec_of(o);
    let sol = out.stage("solve", || solve_ebsvie(spec, &ens, &opts))?;
    let der = out.stage("derivative", || {
        solve_derivative_ebsvie(spec, &ens, &sol, &opts)
    })?;
    let diag = out.stage("diag", || compute_diag(&sol.z, &der.dz))?;
    out.write_with("dy.csv", |b| {
        write_bitemporal(b, &meta("dy", &ens), &der.dy, true)
    })?;
    out.write_with("dz.csv", |b| {
        write_bitemporal(b, &meta("dz", &ens), &der.dz, true)
    })?;
    out.write_with("diag.csv", |b| write_adapted(b, &meta("diag", &ens), &diag))?;
    let cf = &o.closed_form;
    let mut errors = Vec::new();
    if let Some(f) = &cf.dy {
        errors.push(("dy".into(), bitemporal_error(&der.dy, f, &ens, 0)));
    }
    if let Some(f) = &cf.dz {
        errors.push(("dz".into(), bitemporal_error(&der.dz, f, &ens, 0)));
    }
    if let Some(f) = &cf.diag {
        errors.push(("diag".into(), adapted_error(&diag, f, &ens)));
    }
    if let Some(f) = &cf.z {
        errors.push(("z".into(), bitemporal_error(&sol.z, f, &ens, 0)));
    }
    Ok(DiagRun {
        ens,
        z: sol.z,
        diag,
        report: sol.report,
        errors,
    })
}

fn diag_cmd(cfg: &RunConfig, out: &mut RunOutput) -> Result<Outcome, CliError> {
    use OracleId::*;
    let o = equation_oracle(cfg, &[O1, O2, O3, O4])?;
    let run = run_diag(cfg, out, &o)?;
    out.write_report(
        "report.toml",
        &EbsvieReport {
            problem: o.id.to_string(),
            solve: (&run.report).into(),
            max_error: max_of(&run.errors),
            errors: run.errors,
        },
    )?;
    Ok(Outcome {
        not_converged: not_converged(&run.report),
        ..Outcome::default()
    })
}

#[derive(Serialize)]
struct PropertyDSummary {
    problem: String,
    min_slope: Option<f64>,
    #[serde(flatten)]
    report: PropertyDReport,
}

fn property_d_cmd(cfg: &RunConfig, out: &mut RunOutput) -> Result<Outcome, CliError> {
    use OracleId::*;
    let o = equation_oracle(cfg, &[O1, O2, O3, O4, O5])?;
    let pd = &cfg.property_d;
    let (rep, meta_) = if let OracleKind::Analytic(dc) = &o.kind {
        let eps = if pd.eps.is_empty() {
            COUNTEREXAMPLE_EPS.to_vec()
        } else {
            pd.eps.clone()
        };
        let ts = if pd.t_values.is_empty() {
            vec![dc.s_lo]
        } else {
            pd.t_values.clone()
        };
        let rep = out.stage("property_d", || property_d_rate_source(dc, &ts, &eps))?;
        (rep, CsvMeta::new("property_d"))
    } else {
        let run = run_diag(cfg, out, &o)?;
        let g = run.ens.grid();
        let n = g.n_steps();
        let eps: Vec<f64> = if !pd.eps.is_empty() {
            pd.eps.clone()
        } else if !pd.eps_steps.is_empty() {
            pd.eps_steps.iter().map(|k| *k as f64 * g.dt()).collect()
        } else {
            [4.0, 8.0, 16.0].iter().map(|k| k * g.dt()).collect()
        };
        let ts = if pd.t_nodes.is_empty() {
            vec![0, n / 4, n / 2]
        } else {
            pd.t_nodes.clone()
        };
        let rep = out.stage("property_d", || {
            property_d_rate(&run.z, &run.diag, &ts, &eps)
        })?;
        (rep, meta("property_d", &run.ens))
    };
    let rows = rep
        .rows
        .iter()
        .map(|r| vec![r.eps, r.t, r.integral, r.average]);
    out.write_with("property_d.csv", |b| {
        write_table(b, &meta_, &["eps", "t", "integral", "average"], rows)
    })?;
    let script = gnuplot_script(
        "property_d.csv",
        header_lines(&meta_),
        "eps",
        &[(3, "integral"), (4, "average")],
    );
    out.write_bytes("property_d.gp", script.as_bytes())?;
    out.write_report(
        "report.toml",
        &PropertyDSummary {
            problem: o.id.to_string(),
            min_slope: rep.min_slope(),
            report: rep,
        },
    )?;
    Ok(Outcome::default())
}

fn control_setup(
    cfg: &RunConfig,
    out: &mut RunOutput,
) -> Result<(ScalarToy, PathEnsemble, ControlOptions), CliError> {
    let toy = cfg.toy()?;
    if (toy.t0 - cfg.grid.s_lo).abs() > 1e-12 || (toy.t1 - cfg.grid.s_hi).abs() > 1e-12 {
        return Err(CliError::Config(format!(
            "problem horizon [{}, {}] differs from the grid",
            toy.t0, toy.t1
        )));
    }
    if cfg.control.policy >= toy.controls.len() {
        return Err(CliError::Config(format!(
            "control.policy = {} but the control set has {} points",
            cfg.control.policy,
            toy.controls.len()
        )));
    }
    let ens = ensemble(cfg, out)?;
    let base = ControlOptions::default();
    let opts = ControlOptions {
        solve: cfg.solver.solve_options(base.solve.clone()),
        tol_h: cfg.solver.tol_h,
        ..base
    };
    Ok((toy, ens, opts))
}

fn write_h_surface(
    out: &mut RunOutput,
    ens: &PathEnsemble,
    bundle: &EquilibriumBundle,
) -> Result<(), CliError> {
    let (n, mp, nu) = (bundle.n_steps(), bundle.n_paths(), bundle.n_controls);
    let rows = (0..n).flat_map(move |j| {
        (0..mp).flat_map(move |p| {
            (0..nu).map(move |v| vec![j as f64, p as f64, v as f64, bundle.h(j, p, v)])
        })
    });
    out.write_with("h_surface.csv", |b| {
        write_table(
            b,
            &meta("H", ens),
            &["node", "path", "control", "value"],
            rows,
        )
    })
}

#[derive(Serialize)]
struct CheckReport {
    policy: usize,
    violation_measure: f64,
    tol_h: f64,
    worst_cells: Vec<bsvie_core::control::WorstCell>,
}

fn equilibrium_check_cmd(cfg: &RunConfig, out: &mut RunOutput) -> Result<Outcome, CliError> {
    let (toy, ens, opts) = control_setup(cfg, out)?;
    let pol = ControlPolicy::constant(&ens, cfg.control.policy);
    let chk = out.stage("check", || check_equilibrium(&toy, &pol, &ens, &opts))?;
    write_h_surface(out, &ens, &chk.bundle)?;
    out.write_report(
        "report.toml",
        &CheckReport {
            policy: cfg.control.policy,
            violation_measure: chk.violation_measure,
            tol_h: chk.tol_h,
            worst_cells: chk.worst_cells.clone(),
        },
    )?;
    Ok(Outcome::default())
}

#[derive(Serialize)]
struct SearchReport {
    start: usize,
    rounds: usize,
    converged: bool,
    history: Vec<f64>,
    cycle: Option<usize>,
    damping_used: bool,
    violation_measure: f64,
    tol_h: f64,
    /// Control index of the result when it is constant.
    constant_policy: Option<usize>,
}

fn equilibrium_search_cmd(cfg: &RunConfig, out: &mut RunOutput) -> Result<Outcome, CliError> {
    let (toy, ens, opts) = control_setup(cfg, out)?;
    let start = ControlPolicy::constant(&ens, cfg.control.policy);
    let so = SearchOptions {
        max_rounds: cfg.solver.max_rounds,
        damping: cfg.solver.damping,
        ..SearchOptions::default()
    };
    let res = out.stage("search", || {
        search_equilibrium(&toy, &start, &ens, &opts, &so)
    })?;
    let pol = &res.policy;
    let (nn, mp) = (pol.n_nodes(), pol.n_paths());
    let us = &toy.controls;
    let rows = (0..nn).flat_map(|j| {
        (0..mp).map(move |p| {
            let v = pol.index(PathRole::Primary, p, j);
            vec![j as f64, p as f64, v as f64, us[v]]
        })
    });
    out.write_with("policy.csv", |b| {
        write_table(
            b,
            &meta("policy", &ens),
            &["node", "path", "control", "value"],
            rows,
        )
    })?;
    write_h_surface(out, &ens, &res.last_check.bundle)?;
    let constant_policy =
        (0..toy.controls.len()).find(|&v| *pol == ControlPolicy::constant(&ens, v));
    out.write_report(
        "report.toml",
        &SearchReport {
            start: cfg.control.policy,
            rounds: res.rounds,
            converged: res.converged,
            history: res.history.clone(),
            cycle: res.cycle,
            damping_used: res.damping_used,
            violation_measure: res.last_check.violation_measure,
            tol_h: res.last_check.tol_h,
            constant_policy,
        },
    )?;
    Ok(Outcome {
        not_converged: (!res.converged)
            .then(|| format!("search stopped after {} rounds", res.rounds)),
        ..Outcome::default()
    })
}

fn variational_cmd(cfg: &RunConfig, out: &mut RunOutput) -> Result<Outcome, CliError> {
    let (toy, ens, opts) = control_setup(cfg, out)?;
    let g = ens.grid();
    let v = &cfg.variational;
    let spike = Spike {
        tau_node: v.tau_node.unwrap_or(g.n_steps() / 2),
        control: v.control,
    };
    let eps: Vec<f64> = v.eps_steps.iter().map(|k| *k as f64 * g.dt()).collect();
    let pol = ControlPolicy::constant(&ens, cfg.control.policy);
    let rep = out.stage("variational", || {
        variational_rates(&toy, &pol, spike, &eps, &ens, &opts, cfg.control.cost_paths)
    })?;
    let m = meta("variational", &ens);
    let cols = [
        "eps",
        "x1_sup2",
        "x2_sup2",
        "remainder_sup2",
        "residual_rms",
        "cost_change",
        "h_integral",
    ];
    let rows = rep.rows.iter().map(|r| {
        vec![
            r.eps,
            r.x1_sup2,
            r.x2_sup2,
            r.remainder_sup2,
            r.residual_rms,
            r.cost_change,
            r.h_integral,
        ]
    });
    out.write_with("variational.csv", |b| write_table(b, &m, &cols, rows))?;
    let script = gnuplot_script(
        "variational.csv",
        header_lines(&m),
        "eps",
        &[
            (2, "x1_sup2"),
            (3, "x2_sup2"),
            (4, "remainder_sup2"),
            (5, "residual_rms"),
        ],
    );
    out.write_bytes("variational.gp", script.as_bytes())?;
    out.write_report("report.toml", &rep)?;
    Ok(Outcome::default())
}

#[derive(Serialize)]
struct SuiteReport {
    seed: u64,
    all_passed: bool,
    oracles: Vec<bsvie_core::oracles::OracleOutcome>,
}

fn oracle_suite_cmd(cfg: &RunConfig, out: &mut RunOutput) -> Result<Outcome, CliError> {
    let seed = cfg.ensemble.seed;
    let mut results = Vec::new();
    for o in oracle_suite() {
        let r = out.stage(&o.id.to_string(), || verify_oracle(&o, seed))?;
        results.push(r);
    }
    let rows = results.iter().enumerate().map(|(i, r)| {
        vec![
            (i + 1) as f64,
            f64::from(u8::from(r.passed)),
            r.max_error,
            r.tolerance,
        ]
    });
    out.write_with("suite.csv", |b| {
        write_table(
            b,
            &CsvMeta::new("oracle_suite").with_seed(seed),
            &["oracle", "passed", "max_error", "tolerance"],
            rows,
        )
    })?;
    let all_passed = results.iter().all(|r| r.passed);
    let oracles = results
        .iter()
        .map(|r| OracleStatus {
            id: r.id.to_string(),
            passed: r.passed,
        })
        .collect();
    let failed = (!all_passed).then(|| {
        let ids: Vec<String> = results
            .iter()
            .filter(|r| !r.passed)
            .map(|r| r.id.to_string())
            .collect();
        format!("oracles failed: {}", ids.join(", "))
    });
    out.write_report(
        "report.toml",
        &SuiteReport {
            seed,
            all_passed,
            oracles: results,
        },
    )?;
    Ok(Outcome {
        failed,
        oracles,
        ..Outcome::default()
    })
}
