use std::path::Path;
use std::process::{Command, Output};

use approx::assert_relative_eq;
use linregime::report::validate;
use linregime::{load_csv, value, ColumnConfig, RegimeParameter};
use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_linregime")).args(args).output().expect("binary runs")
}

fn json_of(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_slice(&out.stdout).expect("stdout is JSON");
    validate(&v).expect("report passes schema check");
    v
}

fn emit(dir: &Path, n: usize, seed: &str) -> String {
    let path = dir.join("sim.csv");
    let p = path.to_str().unwrap().to_string();
    let out = run(&["--deterministic", "--seed", seed, "simulate", "--n", &n.to_string(), "--emit-data", &p]);
    let v = json_of(&out);
    assert_eq!(v["command"], "simulate-data");
    assert_eq!(v["result"]["n"], n);
    assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), n + 1);
    p
}

#[test]
fn fit_reports_every_section() {
    let v = json_of(&run(&["--deterministic", "--seed", "5", "fit", "--n", "800", "--population", "60", "--generations", "20"]));
    let r = &v["result"];
    let beta: Vec<f64> = r["search"]["beta_hat"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    assert_eq!(beta.len(), 3);
    assert_relative_eq!(beta.iter().map(|b| b * b).sum::<f64>(), 1.0, epsilon = 1e-12);
    let (lo, hi) = (r["value"]["ci_lo"].as_f64().unwrap(), r["value"]["ci_hi"].as_f64().unwrap());
    assert!(lo <= r["value"]["value"].as_f64().unwrap() && r["value"]["value"].as_f64().unwrap() <= hi);
    assert!(v.get("generated_at_unix").is_none());
}

#[test]
fn oracle_fit_recovers_direction() {
    let v = json_of(&run(&["--deterministic", "--seed", "11", "fit", "--n", "2000", "--nuisance", "oracle"]));
    let b: Vec<f64> = v["result"]["search"]["beta_hat"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    let truth = [0.0, 2.0 / 5f64.sqrt(), 1.0 / 5f64.sqrt()];
    let cos: f64 = b.iter().zip(truth).map(|(x, y)| x * y).sum();
    assert!(cos.clamp(-1.0, 1.0).acos() < 0.15, "angle {} for {b:?}", cos.acos());
}

#[test]
fn csv_round_trip_matches_generated_data() {
    let dir = tempfile::tempdir().unwrap();
    let path = emit(dir.path(), 300, "21");
    let cols = ColumnConfig {
        outcome: "y".into(),
        treatment: "a".into(),
        covariates: vec!["x1".into(), "x2".into()],
        intercept: true,
        standardize: false,
    };
    let loaded = load_csv(&path, &cols).unwrap();
    assert_eq!(loaded.n(), 300);
    assert_eq!(loaded.dim(), 3);

    let out = run(&[
        "--deterministic", "--seed", "2", "fit", "--data", &path, "--outcome", "y", "--treatment", "a",
        "--covariates", "x1,x2", "--nuisance", "logistic", "--population", "40", "--generations", "10",
    ]);
    let v = json_of(&out);
    assert_eq!(v["result"]["data"]["n"], 300);

    // the value reported for β̂ is reproducible from the library on the same rows
    let b: Vec<f64> = v["result"]["search"]["beta_hat"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    let beta = RegimeParameter::from_unnormalized(b).unwrap();
    let spec = linregime::EstimatorSpec::with_method(linregime::Method::Logistic);
    let nf = linregime::NuisanceEstimator::fit(&spec, &loaded).unwrap();
    assert_relative_eq!(value(&loaded, &nf, &beta).unwrap(), v["result"]["value"]["value"].as_f64().unwrap(), max_relative = 1e-12);
}

#[test]
fn missing_column_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = emit(dir.path(), 40, "1");
    let out = run(&["fit", "--data", &path, "--outcome", "y", "--treatment", "trt", "--covariates", "x1"]);
    assert_eq!(out.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&out.stderr).expect("stderr is JSON");
    assert_eq!(err["error"]["kind"], "missing_column");
    assert!(err["error"]["message"].as_str().unwrap().contains("trt"));
    assert!(out.stdout.is_empty());
}

#[test]
fn unreadable_file_and_bad_flags() {
    let out = run(&["fit", "--data", "/definitely/not/here.csv", "--outcome", "y", "--treatment", "a", "--covariates", "x1"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["fit", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(run(&["--help"]).status.success());
}

#[test]
fn deterministic_runs_are_byte_identical() {
    let args = ["--deterministic", "--seed", "77", "bootstrap-ci", "--n", "600", "--bootstrap", "15", "--population", "40", "--generations", "10"];
    let a = run(&args);
    let b = run(&args);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let c = run(&["--deterministic", "--seed", "78", "bootstrap-ci", "--n", "600", "--bootstrap", "15", "--population", "40", "--generations", "10"]);
    assert_ne!(a.stdout, c.stdout);
}

#[test]
fn bootstrap_flags_follow_intervals() {
    let dir = tempfile::tempdir().unwrap();
    let draws = dir.path().join("draws.csv");
    let v = json_of(&run(&[
        "--deterministic", "--seed", "4", "bootstrap-ci", "--n", "1500", "--bootstrap", "30", "--nuisance", "oracle",
        "--population", "60", "--generations", "20", "--draws-csv", draws.to_str().unwrap(),
    ]));
    let intervals = v["result"]["bootstrap"]["intervals"].as_array().unwrap();
    assert_eq!(intervals.len(), 3);
    for iv in intervals {
        let (lo, hi) = (iv["lo"].as_f64().unwrap(), iv["hi"].as_f64().unwrap());
        assert_eq!(iv["excludes_zero"].as_bool().unwrap(), lo > 0.0 || hi < 0.0);
        assert_relative_eq!(iv["length"].as_f64().unwrap(), hi - lo, epsilon = 1e-12);
    }
    let csv = std::fs::read_to_string(draws).unwrap();
    assert_eq!(csv.lines().next(), Some("b,coordinate,value"));
    assert_eq!(csv.lines().count(), 1 + 30 * 3);
}

#[test]
fn sweep_recommends_a_grid_point() {
    let v = json_of(&run(&[
        "--deterministic", "--seed", "9", "sweep", "--n", "800", "--bootstrap", "10", "--epsilon-grid", "0.3,0.5,0.7",
        "--population", "40", "--generations", "10",
    ]));
    let sweep = &v["result"]["sweep"];
    let reports = sweep["reports"].as_array().unwrap();
    assert_eq!(reports.len(), 3);
    let eps: Vec<f64> = reports.iter().map(|r| r["epsilon"].as_f64().unwrap()).collect();
    assert_eq!(eps, vec![0.3, 0.5, 0.7]);
    let rec = sweep["recommendation"]["epsilon"].as_f64().unwrap();
    assert!(eps.contains(&rec));
    let sums: Vec<f64> = reports.iter().map(|r| r["summed_length"].as_f64().unwrap()).collect();
    let k = sweep["recommendation"]["index"].as_u64().unwrap() as usize;
    let is_local_min = (k == 0 || sums[k] <= sums[k - 1]) && (k + 1 == sums.len() || sums[k] <= sums[k + 1]);
    assert!(is_local_min, "{sums:?} -> {k}");
}

#[test]
fn rate_and_simulate_run_small() {
    let v = json_of(&run(&["--deterministic", "--seed", "3", "rate", "--sizes", "300,1200", "--replications", "3", "--nuisance", "oracle"]));
    assert_eq!(v["result"]["rate"]["rows"].as_array().unwrap().len(), 2);
    let out = run(&[
        "--deterministic", "--seed", "3", "simulate", "--n", "400", "--replications", "3", "--bootstrap", "0",
        "--nuisance", "oracle", "--truth-draws", "20000",
    ]);
    let v = json_of(&out);
    let s = &v["result"]["summary"];
    assert_eq!(s["completed"], 3);
    let cov = s["value_ci_coverage"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&cov));
    assert!(String::from_utf8_lossy(&out.stderr).contains("beta01"));
}
