//! End-to-end tests of the `gmfg` binary: exit codes, output files, manifest.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn base_config() -> Value {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/benchmark.json");
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// The benchmark on a coarse grid, so each run takes well under a second.
fn coarse(mut v: Value) -> Value {
    v["grids"] = json!({"n_t": 200, "n_alpha": 20});
    v
}

fn write_config(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(v).unwrap()).unwrap();
    path
}

fn gmfg(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gmfg")).arg("--out").arg(out).args(args).output().unwrap()
}

fn run_config(dir: &TempDir, v: &Value, args: &[&str]) -> (Output, PathBuf) {
    let cfg = write_config(dir.path(), "config.json", v);
    let out = dir.path().join("out");
    let mut full = vec!["--config", cfg.to_str().unwrap()];
    full.extend_from_slice(args);
    (gmfg(&full, &out), out)
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn csv_column(path: &Path, name: &str) -> Vec<f64> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let idx = r.headers().unwrap().iter().position(|h| h == name).unwrap();
    r.records().map(|rec| rec.unwrap()[idx].parse().unwrap()).collect()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn check_reports_benchmark_margins() {
    let dir = TempDir::new().unwrap();
    let (o, out) = run_config(&dir, &coarse(base_config()), &["check"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report = read_json(&out.join("check.json"));
    assert!((report["assumptions"]["h4_min_eigenvalue"].as_f64().unwrap() - 0.09).abs() < 1e-15);
    assert!(report["contraction"]["c_xi"].as_f64().unwrap() > 1.0);
    assert_eq!(report["spectrum"]["rank"], 3);
    assert!(report["monotonicity"]["case"].is_string());
    // stdout carries the same report.
    let printed: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(printed, report);
    let manifest = read_json(&out.join("manifest.json"));
    assert_eq!(manifest["status"], "complete");
    assert_eq!(manifest["spec_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn exit_codes_follow_the_contract() {
    let dir = TempDir::new().unwrap();

    let mut v = coarse(base_config());
    v["coefficients"]["Qf"] = json!(-1.0);
    let (o, out) = run_config(&dir, &v, &["check"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Qf"));
    assert_eq!(read_json(&out.join("manifest.json"))["status"], "failed");

    let mut v = coarse(base_config());
    v["coefficients"].as_object_mut().unwrap().remove("R");
    let (o, _) = run_config(&dir, &v, &["solve"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("`R`"), "{}", stderr(&o));

    // γ = 1 breaks the risk margin: 0.24 − 2·0.25 < 0.
    let mut v = coarse(base_config());
    v["gamma"] = json!(1.0);
    for cmd in ["check", "solve"] {
        let (o, out) = run_config(&dir, &v, &[cmd]);
        assert_eq!(o.status.code(), Some(2), "{cmd}: {}", stderr(&o));
        assert_eq!(read_json(&out.join("manifest.json"))["status"], "failed");
    }

    // The benchmark is not contractive, so a forced-off fixed point is a solver error.
    let (o, _) = run_config(&dir, &coarse(base_config()), &["solve", "--method", "fixed-point"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("contraction"));

    let mut v = coarse(base_config());
    v["solver"] = json!({"method": "fixed_point", "max_iter": 2, "force": true});
    let (o, _) = run_config(&dir, &v, &["solve"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("did not converge"));

    let o = gmfg(&["solve", "--no-such-flag"], &dir.path().join("x"));
    assert_eq!(o.status.code(), Some(1));
    let o = gmfg(&["--preset", "nope", "check"], &dir.path().join("y"));
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn decoupled_solve_has_zero_mean_field() {
    let dir = TempDir::new().unwrap();
    let mut v = coarse(base_config());
    v["graphon"] = json!({"kind": "constant", "c": 0.0});
    let (o, out) = run_config(&dir, &v, &["solve", "--method", "both"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for file in ["solution_fixed_point.csv", "solution_spectral.csv"] {
        let path = out.join(file);
        assert!(csv_column(&path, "z").iter().all(|&z| z == 0.0));
        assert!(csv_column(&path, "S").iter().all(|&s| s == 0.0));
        assert!(csv_column(&path, "r").iter().any(|&r| r != 0.0));
    }
}

#[test]
fn both_methods_agree_on_small_coupling() {
    let dir = TempDir::new().unwrap();
    let mut v = coarse(base_config());
    v["coefficients"]["D"] = json!(0.2);
    let (o, out) = run_config(&dir, &v, &["solve", "--method", "both"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let s = read_json(&out.join("summary.json"));
    assert!(s["method_difference"].as_f64().unwrap() <= 1e-4);
    assert_eq!(s["solutions"].as_array().unwrap().len(), 2);
    let header = std::fs::read_to_string(out.join("riccati.csv")).unwrap();
    assert!(header.starts_with("t,Pi,P_perp,P_lambda_1,P_lambda_2,P_lambda_3\n"));
    // Nominal grid: 20 α × 201 t rows.
    assert_eq!(csv_column(&out.join("solution_spectral.csv"), "t").len(), 20 * 201);
}

#[test]
fn benchmark_solution_is_symmetric_in_alpha() {
    let dir = TempDir::new().unwrap();
    let (o, out) = run_config(&dir, &coarse(base_config()), &["solve", "--method", "spectral"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let path = out.join("solution_spectral.csv");
    let (alpha, z) = (csv_column(&path, "alpha"), csv_column(&path, "z"));
    let nodes = 201;
    // Nodes i and 19 − i are reflections α ↦ 1 − α.
    for i in 0..10 {
        let j = 19 - i;
        assert!((alpha[i * nodes] + alpha[j * nodes] - 1.0).abs() < 1e-15);
        for k in 0..nodes {
            assert!((z[i * nodes + k] - z[j * nodes + k]).abs() < 1e-6);
        }
    }
}

#[test]
fn simulate_writes_trajectories_and_costs() {
    let dir = TempDir::new().unwrap();
    let mut v = coarse(base_config());
    v["coefficients"]["D"] = json!(0.2);
    let (o, out) = run_config(&dir, &v, &["simulate", "--N", "4", "--M", "3", "--seed", "5", "--probes", "1,4"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let agents = csv_column(&out.join("trajectories.csv"), "agent");
    assert_eq!(agents.len(), 3 * 4 * 201);
    assert_eq!(agents.iter().copied().fold(0.0, f64::max), 4.0);
    let probes = csv_column(&out.join("costs.csv"), "agent");
    assert_eq!(probes, vec![1.0, 4.0]);
    let manifest = read_json(&out.join("manifest.json"));
    assert_eq!(manifest["seed"], 5);
    let outputs: Vec<&str> = manifest["outputs"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert_eq!(outputs, ["trajectories.csv", "exponents.csv", "costs.csv", "summary.json"]);

    let fresh = TempDir::new().unwrap();
    let (o, out) = run_config(&fresh, &v, &["simulate", "--N", "4", "--M", "3", "--no-trajectories"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(!out.join("trajectories.csv").exists());
    assert!(out.join("exponents.csv").exists());

    let (o, _) = run_config(&dir, &v, &["simulate", "--N", "4", "--M", "3", "--probes", "5"]);
    assert_eq!(o.status.code(), Some(1));
    let (o, _) = run_config(&dir, &v, &["simulate", "--N", "400", "--M", "100000"]);
    assert_eq!(o.status.code(), Some(1), "trajectory memory guard");
    assert!(stderr(&o).contains("--no-trajectories"));
}

#[test]
fn noiseless_simulation_has_no_monte_carlo_error() {
    let dir = TempDir::new().unwrap();
    let mut v = coarse(base_config());
    v["coefficients"]["D"] = json!(0.2);
    v["coefficients"]["sigma"] = json!(0.0);
    v["initial_law"] = json!({"kind": "deterministic", "mean": 2.0});
    let (o, out) = run_config(&dir, &v, &["simulate", "--N", "5", "--M", "40", "--no-trajectories"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(csv_column(&out.join("costs.csv"), "std_error").iter().all(|&s| s == 0.0));
}

#[test]
fn simulation_is_thread_count_independent() {
    let dir = TempDir::new().unwrap();
    let mut v = coarse(base_config());
    v["coefficients"]["D"] = json!(0.2);
    let cfg = write_config(dir.path(), "c.json", &v);
    let run = |threads: &str, name: &str| {
        let out = dir.path().join(name);
        let args = ["--config", cfg.to_str().unwrap(), "--threads", threads, "simulate", "--N", "6", "--M", "70"];
        assert_eq!(gmfg(&args, &out).status.code(), Some(0));
        (std::fs::read(out.join("trajectories.csv")).unwrap(), std::fs::read(out.join("exponents.csv")).unwrap())
    };
    assert_eq!(run("1", "a"), run("4", "b"));
}

#[test]
fn nash_gap_outputs() {
    let dir = TempDir::new().unwrap();
    let mut v = coarse(base_config());
    v["graphon"] = json!({"kind": "constant", "c": 0.0});
    let (o, out) = run_config(&dir, &v, &["nash-gap", "--N-list", "4,8", "--M", "64", "--seed", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report = read_json(&out.join("nash_gap.json"));
    for row in report["rows"].as_array().unwrap() {
        let (m, se) = (row["paired"]["mean"].as_f64().unwrap(), row["paired"]["std_error"].as_f64().unwrap());
        assert!(m.abs() <= 3.0 * se, "decoupled gap {m} ± {se}");
        assert!(row["deviation"].is_null());
    }
    assert_eq!(report["summaries"].as_array().unwrap().len(), 2);
    assert_eq!(csv_column(&out.join("nash_gap.csv"), "N").len(), 6);

    let mut v = coarse(base_config());
    v["coefficients"]["D"] = json!(0.2);
    let (o, out) = run_config(&dir, &v, &["nash-gap", "--N-list", "4", "--M", "64", "--deviate", "0.5"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report = read_json(&out.join("nash_gap.json"));
    let rows = report["rows"].as_array().unwrap();
    let deviated: Vec<&Value> = rows.iter().filter(|r| !r["deviation"].is_null()).collect();
    assert_eq!(deviated.len(), 1);
    assert_eq!(deviated[0]["deviation"]["delta_prime"], 0.5);
    assert!(deviated[0]["deviation"]["change"]["std_error"].as_f64().unwrap() > 0.0);
}

#[test]
fn step_graphon_from_csv() {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("w.csv"), "0.5,0.2,0.1\n0.2,0.5,0.2\n0.1,0.2001,0.5\n").unwrap();
    let mut v = coarse(base_config());
    v["coefficients"]["D"] = json!(0.2);
    v["graphon"] = json!({"kind": "step", "path": "w.csv"});
    let (o, out) = run_config(&dir, &v, &["check"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stderr(&o).contains("symmetrized"));
    let hash = read_json(&out.join("manifest.json"))["spec_hash"].clone();

    std::fs::write(dir.path().join("w.csv"), "0.5,0.2,0.1\n0.2,0.5,0.2\n0.1,0.2,0.5\n").unwrap();
    let (o, out) = run_config(&dir, &v, &["check"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(!stderr(&o).contains("symmetrized"));
    assert_ne!(read_json(&out.join("manifest.json"))["spec_hash"], hash, "hash covers the step file");

    v["graphon"] = json!({"kind": "step", "path": "missing.csv"});
    let (o, _) = run_config(&dir, &v, &["check"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn output_directory_from_environment() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.json", &coarse(base_config()));
    let target = dir.path().join("from-env");
    let o = Command::new(env!("CARGO_BIN_EXE_gmfg"))
        .env("GMFG_OUTPUT_DIR", &target)
        .args(["--config", cfg.to_str().unwrap(), "check"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(target.join("check.json").exists());
    assert!(target.join("manifest.json").exists());
}
