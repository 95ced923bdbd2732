use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_nisio");

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn write_config(dir: &TempDir, name: &str, text: &str) -> PathBuf {
    let path = dir.path().join(name);
    std::fs::write(&path, text).unwrap();
    path
}

fn run(args: &[&str], out: &Path) -> Output {
    Command::new(BIN).args(args).arg("--out").arg(out).env_remove("NISIO_THREADS").output().unwrap()
}

/// Runs a command that must succeed and returns the parsed report, after
/// checking stdout and `report.json` agree.
fn report(args: &[&str], out: &Path) -> Value {
    let o = run(args, out);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    let file = std::fs::read_to_string(out.join("report.json")).unwrap();
    let stdout: Value = serde_json::from_slice(&o.stdout).unwrap();
    let on_disk: Value = serde_json::from_str(&file).unwrap();
    assert_eq!(stdout, on_disk);
    on_disk
}

fn failure(args: &[&str], out: &Path) -> (i32, Value) {
    let o = run(args, out);
    let code = o.status.code().unwrap();
    let err: Value = serde_json::from_slice(&o.stderr)
        .unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {}", String::from_utf8_lossy(&o.stderr)));
    (code, err)
}

fn validator() -> jsonschema::Validator {
    let text =
        std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas/report.schema.json")).unwrap();
    jsonschema::validator_for(&serde_json::from_str(&text).unwrap()).unwrap()
}

fn assert_valid(v: &jsonschema::Validator, report: &Value) {
    let errors: Vec<String> = v.iter_errors(report).map(|e| format!("{} at {}", e, e.instance_path)).collect();
    assert!(errors.is_empty(), "{errors:#?}\n{report:#}");
}

const CONSTANT_COST: &str = "problem.topology = torus\nproblem.n = 32\nproblem.sigma = \"1 + 0.5*sin(2*pi*x1)\"\n\
                             problem.b1 = \"cos(2*pi*x1)\"\nproblem.r = 1\n";

#[test]
fn constant_cost_gives_its_value() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "c.cfg", CONSTANT_COST);
    for method in ["evolution", "policy_iteration"] {
        let cfg = write_config(&dir, "m.cfg", &format!("{CONSTANT_COST}solver.method = {method}\n"));
        let r = report(&["solve", cfg.to_str().unwrap()], &dir.path().join(method));
        let rho = r["rho"].as_f64().unwrap();
        assert!((rho - 1.0).abs() <= 1e-10, "{method}: {rho}");
        assert_eq!(r["method"], method);
    }
    let r = report(&["solve", cfg.to_str().unwrap()], dir.path());
    let phi = std::fs::read_to_string(dir.path().join("phi.csv")).unwrap();
    let mut lines = phi.lines();
    assert_eq!(lines.next(), Some("node,x1,phi,policy"));
    assert_eq!(lines.count(), 32);
    assert_eq!(r["files"], serde_json::json!(["phi.csv"]));
}

#[test]
fn bounds_on_ones_are_the_cost_extremes() {
    let dir = TempDir::new().unwrap();
    // min over v of the cost is attained at v = 0, so G1 = cos(2πx) on the grid
    let cfg = write_config(
        &dir,
        "b.cfg",
        "problem.topology = torus\nproblem.n = 16\nproblem.controls = \"0; 0.5\"\nproblem.sigma = 1\n\
         problem.b1 = v1\nproblem.r = \"cos(2*pi*x1) + v1\"\n",
    );
    let r = report(&["bounds", cfg.to_str().unwrap(), "--f", "ones"], dir.path());
    assert_eq!(r["lower"].as_f64().unwrap(), -1.0);
    assert_eq!(r["upper"].as_f64().unwrap(), 1.0);
    assert_eq!(r["contains"], true);

    let r = report(&["bounds", cfg.to_str().unwrap(), "--f", "phi", "--search", "2"], dir.path());
    assert!(r["gap"].as_f64().unwrap() <= 1e-8);
    // candidate 0 is the test function itself
    assert_eq!(r["search"].as_array().unwrap().len(), 3);
}

#[test]
fn simulate_is_reproducible_across_runs_and_thread_counts() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        &dir,
        "s.cfg",
        "problem.topology = torus\nproblem.n = 16\nproblem.controls = \"-1; 1\"\nproblem.sigma = 1\n\
         problem.b1 = v1\nproblem.r = \"cos(2*pi*x1)\"\nmc.T = 0.5\nmc.dt_sim = 0.01\nmc.N = 300\nmc.seed = 5\n",
    );
    let cfg = cfg.to_str().unwrap();
    let files = |sub: &str, threads: &str| {
        let out = dir.path().join(sub);
        let o = Command::new(BIN)
            .args(["simulate", cfg, "--out"])
            .arg(&out)
            .env("NISIO_THREADS", threads)
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        (std::fs::read(out.join("report.json")).unwrap(), std::fs::read(out.join("sweep.csv")).unwrap())
    };
    let a = files("a", "1");
    assert_eq!(a, files("b", "1"));
    assert_eq!(a, files("c", "3"));

    let other = run(&["simulate", cfg, "--seed", "6"], &dir.path().join("d"));
    assert!(other.status.success());
    assert_ne!(std::fs::read(dir.path().join("d/sweep.csv")).unwrap(), a.1);

    let r: Value = serde_json::from_slice(&a.0).unwrap();
    let labels: Vec<&str> = r["estimates"].as_array().unwrap().iter().map(|e| e["policy"].as_str().unwrap()).collect();
    assert_eq!(labels, ["optimal", "constant:0", "constant:1"]);
}

#[test]
fn invalid_input_exits_one_with_a_located_error() {
    let dir = TempDir::new().unwrap();
    let cfg =
        write_config(&dir, "n.cfg", "problem.topology = torus\nproblem.n = 4\nproblem.sigma = 1\nproblem.r = 0\n");
    let (code, err) = failure(&["solve", cfg.to_str().unwrap()], dir.path());
    assert_eq!(code, 1);
    assert_eq!(err["error"], "ValidationError");
    assert_eq!(err["line"], 2);
    assert!(err["message"].as_str().unwrap().contains("n ≥ 8"), "{err}");

    let cfg = write_config(
        &dir,
        "e.cfg",
        "problem.topology = torus\nproblem.n = 16\nproblem.sigma = 1\nproblem.r = \"1 +\"\n",
    );
    let (code, err) = failure(&["solve", cfg.to_str().unwrap()], dir.path());
    assert_eq!(code, 1);
    assert_eq!(err["error"], "ParseError");
    assert_eq!(err["line"], 4);

    let (code, err) = failure(&["solve", "/nonexistent/config"], dir.path());
    assert_eq!(code, 1);
    assert_eq!(err["error"], "IoError");

    // the rate function is only defined for a single control
    let multi = configs().join("control_cost.cfg");
    let (code, _) = failure(&["dv", multi.to_str().unwrap()], dir.path());
    assert_eq!(code, 1);

    let usage = Command::new(BIN).arg("no-such-command").output().unwrap();
    assert_eq!(usage.status.code(), Some(1));
    let help = Command::new(BIN).arg("--help").output().unwrap();
    assert_eq!(help.status.code(), Some(0));
}

#[test]
fn numerical_failure_exits_two() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        &dir,
        "x.cfg",
        "problem.topology = torus\nproblem.n = 16\nproblem.sigma = 1\nproblem.r = \"cos(2*pi*x1)\"\nsolver.max_iters = 3\n",
    );
    let (code, err) = failure(&["solve", cfg.to_str().unwrap()], dir.path());
    assert_eq!(code, 2);
    assert_eq!(err["error"], "NoConvergence");
    assert!(err["line"].is_null());
}

#[test]
fn every_command_matches_the_schema() {
    let v = validator();
    let dir = TempDir::new().unwrap();
    let single = write_config(
        &dir,
        "dv.cfg",
        "problem.topology = interval\nproblem.n = 24\nproblem.sigma = 0.7\nproblem.b1 = \"-(x1 - 0.5)\"\n\
         problem.r = \"sin(pi*x1)\"\n",
    );
    let cc = configs().join("control_cost.cfg");
    let cc = cc.to_str().unwrap();
    let mut runs: Vec<Vec<String>> = vec![
        vec!["solve".into(), cc.into(), "--n".into(), "16".into()],
        vec!["bounds".into(), cc.into(), "--f".into(), "phi".into(), "--search".into(), "2".into()],
        vec!["dv".into(), single.to_str().unwrap().into()],
        vec!["hji-check".into(), cc.into()],
        vec!["simulate".into(), cc.into(), "--n".into(), "16".into()],
        vec!["orbit".into(), cc.into(), "--stride".into(), "10".into(), "--diagnostics".into()],
        vec!["evolve".into(), cc.into(), "--t".into(), "0.1".into(), "--every".into(), "7".into()],
    ];
    for name in ["interval_drift.cfg", "torus2d.cfg"] {
        let c = configs().join(name).to_str().unwrap().to_string();
        runs.push(vec!["solve".into(), c.clone()]);
        runs.push(vec!["orbit".into(), c]);
    }
    runs.push(vec!["matrix-cw".into(), configs().join("two_by_two.csv").to_str().unwrap().into()]);

    // keep the Monte Carlo run short
    let short =
        write_config(&dir, "short.cfg", &std::fs::read_to_string(cc).unwrap().replace("mc.N = 2000", "mc.N = 200"));
    runs[4][1] = short.to_str().unwrap().into();

    for (k, args) in runs.iter().enumerate() {
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let out = dir.path().join(format!("run{k}"));
        let r = report(&args, &out);
        assert_eq!(r["command"], args[0]);
        assert_valid(&v, &r);
        for f in r["files"].as_array().unwrap() {
            assert!(out.join(f.as_str().unwrap()).is_file(), "{f}");
        }
    }

    let mut broken = report(&["hji-check", cc], &dir.path().join("broken"));
    broken["command"] = "solve".into();
    assert!(!v.is_valid(&broken));
}

#[test]
fn matrix_cw_reports_the_perron_root() {
    let dir = TempDir::new().unwrap();
    let m = write_config(&dir, "m.csv", "# companion-like\n0, 1, 0\n0, 0, 1\n6, 0, 0\n");
    let r = report(&["matrix-cw", m.to_str().unwrap()], dir.path());
    let lambda = r["lambda"].as_f64().unwrap();
    assert!((lambda - 6f64.cbrt()).abs() <= 1e-12, "{lambda}");
    let ones = &r["ones"];
    assert!(ones["lower"].as_f64().unwrap() <= lambda && lambda <= ones["upper"].as_f64().unwrap());

    let bad = write_config(&dir, "bad.csv", "1, -1\n0, 1\n");
    let (code, _) = failure(&["matrix-cw", bad.to_str().unwrap()], dir.path());
    assert_eq!(code, 1);
}
