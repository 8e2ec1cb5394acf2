use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bsvie(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bsvie"))
        .args(args)
        .current_dir(dir)
        .env_remove("BSVIE_OUTPUT_DIR")
        .output()
        .unwrap()
}

fn with_config(text: &str) -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, text).unwrap();
    (dir, cfg)
}

fn read_toml(path: &Path) -> toml::Table {
    std::fs::read_to_string(path).unwrap().parse().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn misspelled_key_fails_before_any_work() {
    let (dir, cfg) = with_config("command = \"simulate\"\n[grid]\nn_steps = 8\n");
    let out = bsvie(&["-c", cfg.to_str().unwrap(), "-o", "out"], dir.path());
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).starts_with("error: category=config message="));
    assert!(stderr(&out).contains("n_steps"));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn out_of_range_values_and_command_clash_are_config_errors() {
    for text in [
        "[grid]\nn = 0\n",
        "[solver]\ntheta = 1.5\n",
        "command = \"diag\"\n",
    ] {
        let (dir, cfg) = with_config(text);
        let out = bsvie(&["simulate", "-c", cfg.to_str().unwrap()], dir.path());
        assert_eq!(out.status.code(), Some(2), "{text}: {}", stderr(&out));
    }
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(bsvie(&[], dir.path()).status.code(), Some(2));
    let (dir, cfg) = with_config("[problem]\nname = \"O5\"\n");
    let out = bsvie(&["solve-ebsvie", "-c", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn oracle_suite_manifest_lists_all_oracles() {
    let dir = tempfile::tempdir().unwrap();
    let out = bsvie(&["oracle-suite", "-o", "suite"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let m = read_toml(&dir.path().join("suite/manifest.toml"));
    assert_eq!(m["status"].as_str(), Some("ok"));
    let oracles = m["oracles"].as_array().unwrap();
    let ids: Vec<&str> = oracles.iter().map(|o| o["id"].as_str().unwrap()).collect();
    assert_eq!(ids, ["O1", "O2", "O3", "O4", "O5", "O6"]);
    assert!(oracles.iter().all(|o| o["passed"].as_bool() == Some(true)));
    assert_eq!(m["config_sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn volterra_run_reports_convergence_and_accuracy() {
    let (dir, cfg) =
        with_config("command = \"solve-ebsvie\"\n[grid]\nn = 64\n[ensemble]\nm = 16\n");
    let out = bsvie(&["-c", cfg.to_str().unwrap(), "-o", "o3"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let rep = read_toml(&dir.path().join("o3/report.toml"));
    let tol = bsvie_core::SolveOptions::default().tol;
    assert!(rep["converged"].as_bool().unwrap());
    assert!(rep["final_delta"].as_float().unwrap() <= tol);
    assert!(rep["max_error"].as_float().unwrap() <= 1e-3);

    let m = read_toml(&dir.path().join("o3/manifest.toml"));
    assert_eq!(m["seed"].as_integer(), Some(7));
    let stages: Vec<&str> = m["stages"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["name"].as_str().unwrap())
        .collect();
    assert_eq!(stages, ["simulate", "solve"]);
    let files: Vec<&str> = m["files"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| f["name"].as_str().unwrap())
        .collect();
    assert_eq!(files, ["y.csv", "z.csv", "eta.csv", "report.toml"]);
    let y = std::fs::read_to_string(dir.path().join("o3/y.csv")).unwrap();
    let mut lines = y.lines();
    assert_eq!(lines.next(), Some("schema=1"));
    assert!(y.contains("t_index,s_index,path,component,value"));
}

#[test]
fn counterexample_property_d_prints_averages_and_fails() {
    let (dir, cfg) = with_config("command = \"property-d\"\n[problem]\nname = \"O5\"\nr = 2.0\n");
    let out = bsvie(&["-c", cfg.to_str().unwrap(), "-o", "o5"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let rep = read_toml(&dir.path().join("o5/report.toml"));
    assert_eq!(rep["holds"].as_bool(), Some(false));
    let avgs: Vec<f64> = rep["rows"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["average"].as_float().unwrap())
        .collect();
    for (a, w) in avgs.iter().zip([10.0, 10.0 * 2f64.sqrt(), 20.0]) {
        assert!((a - w).abs() <= 1e-9, "{avgs:?}");
    }
    assert!(dir.path().join("o5/property_d.gp").exists());
}

#[test]
fn csvs_are_identical_across_runs_and_thread_counts() {
    let (dir, cfg) = with_config(
        "command = \"diag\"\n[grid]\nn = 8\n[ensemble]\nm = 300\n[problem]\nname = \"O2\"\n",
    );
    let c = cfg.to_str().unwrap();
    for (o, t) in [("a", "1"), ("b", "4"), ("c", "4")] {
        let out = bsvie(&["-c", c, "-o", o, "--threads", t], dir.path());
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    }
    for f in ["dy.csv", "dz.csv", "diag.csv", "report.toml"] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        for o in ["b", "c"] {
            assert_eq!(
                a,
                std::fs::read(dir.path().join(o).join(f)).unwrap(),
                "{o}/{f}"
            );
        }
    }
    let sha =
        |o: &str| read_toml(&dir.path().join(o).join("manifest.toml"))["config_sha256"].clone();
    assert_eq!(sha("a"), sha("b"));
}

#[test]
fn strict_turns_non_convergence_into_exit_3() {
    let (dir, cfg) = with_config(
        "command = \"solve-ebsvie\"\n[grid]\nn = 16\n[ensemble]\nm = 4\n[solver]\nmax_iter = 1\n",
    );
    let c = cfg.to_str().unwrap();
    let lax = bsvie(&["-c", c, "-o", "lax"], dir.path());
    assert_eq!(lax.status.code(), Some(0), "{}", stderr(&lax));
    let m = read_toml(&dir.path().join("lax/manifest.toml"));
    assert_eq!(m["status"].as_str(), Some("ok-not-converged"));
    let strict = bsvie(&["-c", c, "-o", "strict", "--strict"], dir.path());
    assert_eq!(strict.status.code(), Some(3));
    assert!(stderr(&strict).starts_with("error: category=non-convergence"));
    let m = read_toml(&dir.path().join("strict/manifest.toml"));
    assert_eq!(m["status"].as_str(), Some("not-converged"));
}

#[test]
fn output_dir_precedence() {
    let (dir, cfg) = with_config(
        "command = \"simulate\"\noutput_dir = \"from-config\"\n[grid]\nn = 4\n[ensemble]\nm = 8\n",
    );
    let c = cfg.to_str().unwrap();
    assert!(bsvie(&["-c", c], dir.path()).status.success());
    assert!(dir.path().join("from-config/brownian.csv").exists());
    let out = Command::new(env!("CARGO_BIN_EXE_bsvie"))
        .args(["-c", c])
        .current_dir(dir.path())
        .env("BSVIE_OUTPUT_DIR", "from-env")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("from-env/brownian.csv").exists());
    assert!(bsvie(&["-c", c, "-o", "from-flag"], dir.path())
        .status
        .success());
    assert!(dir.path().join("from-flag/report.toml").exists());
}
