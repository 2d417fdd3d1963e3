use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use acefuse::data::{write_csv, DatasetSchema};
use acefuse::estimators::{error_prone_pair, initial_estimate, EstimatorOptions, Method};
use acefuse::fusion::{fuse, FusionInputs, VarianceSource};
use acefuse::sim::{generate, Sampling, SimConfig};
use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_acefuse"))
}

struct Fixture {
    _dir: tempfile::TempDir,
    data: PathBuf,
    schema: PathBuf,
    schema_pi: PathBuf,
    data_pi: PathBuf,
    root: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let d = generate(&SimConfig::paper(400, 120, 1, 3), 0).unwrap();
    let data = root.join("data.csv");
    write_csv(&d, &data).unwrap();
    let mut c = SimConfig::paper(400, 120, 1, 3);
    c.sampling = Sampling::OutcomeDependent { threshold: 0.0, low: 0.2, high: 0.9 };
    let data_pi = root.join("data_pi.csv");
    write_csv(&generate(&c, 0).unwrap(), &data_pi).unwrap();
    let schema = root.join("schema.json");
    std::fs::write(&schema, serde_json::to_string(&DatasetSchema::standard(1, 1, false)).unwrap()).unwrap();
    let schema_pi = root.join("schema_pi.json");
    std::fs::write(&schema_pi, serde_json::to_string(&DatasetSchema::standard(1, 1, true)).unwrap()).unwrap();
    Fixture { _dir: dir, data, schema, schema_pi, data_pi, root }
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn estimate(_f: &Fixture, data: &Path, schema: &Path, extra: &[&str]) -> Output {
    run(bin().arg("estimate").arg("--data").arg(data).arg("--schema").arg(schema).args(extra))
}

#[test]
fn estimate_passes_library_values_through() {
    let f = fixture();
    let out = json(&estimate(&f, &f.data, &f.schema, &["--method", "aipw"]));
    let d = acefuse::data::load_csv(&f.data, &DatasetSchema::standard(1, 1, false)).unwrap();
    let opts = EstimatorOptions::default();
    let inputs = FusionInputs {
        tau2: initial_estimate(&d, Method::Aipw, &opts).unwrap(),
        ep_pairs: vec![error_prone_pair(&d, Method::Aipw, &opts).unwrap()],
        regime: d.design(),
    };
    let lib = fuse(&inputs, &VarianceSource::Analytic, 0.95).unwrap();
    let r = &out["results"][0];
    assert_eq!(r["fusion"]["tau_hat"].as_f64().unwrap(), lib.tau_hat);
    assert_eq!(r["fusion"]["v_hat"].as_f64().unwrap(), lib.v_hat);
    assert_eq!(r["tau2"].as_f64().unwrap(), inputs.tau2.point);
    assert_eq!(r["tau1_ep"][0].as_f64().unwrap(), inputs.ep_pairs[0].0.point);
    assert_eq!(r["tau2_ep"][0].as_f64().unwrap(), inputs.ep_pairs[0].1.point);
    assert_eq!(out["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(out["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn bootstrap_reports_are_byte_identical() {
    let f = fixture();
    let args = ["--method", "match", "--variance", "bootstrap", "--boot-reps", "200", "--seed", "17"];
    let a = estimate(&f, &f.data, &f.schema, &args);
    let b = estimate(&f, &f.data, &f.schema, &args);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let c = run(bin()
        .args(["--threads", "1", "estimate", "--data"])
        .arg(&f.data)
        .arg("--schema")
        .arg(&f.schema)
        .args(args));
    assert_eq!(a.stdout, c.stdout);
}

#[test]
fn bootstrap_without_seed_is_rejected() {
    let f = fixture();
    let out = estimate(&f, &f.data, &f.schema, &["--variance", "bootstrap"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--seed"));
}

#[test]
fn pi_column_needs_known_inclusion_regime() {
    let f = fixture();
    let out = estimate(&f, &f.data_pi, &f.schema_pi, &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("inclusion probabilities require known-inclusion regime"));
    let ok = json(&estimate(&f, &f.data_pi, &f.schema_pi, &["--regime", "known-pi", "--method", "ipw"]));
    assert!(ok["results"][0]["fusion"]["tau_hat"].as_f64().unwrap().is_finite());
}

#[test]
fn missing_column_is_a_data_error() {
    let f = fixture();
    let schema = f.root.join("bad.json");
    let mut s = DatasetSchema::standard(1, 1, false);
    s.x = vec!["nope".into()];
    std::fs::write(&schema, serde_json::to_string(&s).unwrap()).unwrap();
    let out = estimate(&f, &f.data, &schema, &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing column 'nope'"));
}

#[test]
fn embedded_config_replays_the_report() {
    let f = fixture();
    let first = estimate(&f, &f.data, &f.schema, &["--method", "reg,ipw", "--ep-methods", "reg,aipw"]);
    let report = f.root.join("report.json");
    std::fs::write(&report, &first.stdout).unwrap();
    let again = run(bin().arg("estimate").arg("--config").arg(&report));
    assert!(again.status.success());
    assert_eq!(first.stdout, again.stdout);
    let v = json(&first);
    assert_eq!(v["results"].as_array().unwrap().len(), 2);
    assert_eq!(v["results"][1]["fusion"]["ep_diff"].as_array().unwrap().len(), 2);
}

#[test]
fn plan_passes_allocations_through() {
    for (c1, c2, budget, r2) in [(1.0, 4.0, 100.0, 0.0), (1.0, 1.0, 100.0, 1.0), (1.0, 1.0, 1000.0, 0.75)] {
        let out = json(&run(bin().args([
            "plan",
            "--c1",
            &c1.to_string(),
            "--c2",
            &c2.to_string(),
            "--budget",
            &budget.to_string(),
            "--r2",
            &r2.to_string(),
        ])));
        let lib = acefuse::design::optimal_allocation(&acefuse::design::AllocationProblem {
            c1,
            c2,
            budget,
            r_squared: r2,
        })
        .unwrap();
        assert_eq!(out["allocation"], serde_json::to_value(&lib).unwrap());
    }
}

#[test]
fn sensitivity_anchors() {
    let f = fixture();
    let est = json(&estimate(&f, &f.data, &f.schema, &["--method", "reg"]));
    let diff = est["results"][0]["fusion"]["ep_diff"][0].as_f64().unwrap();
    let grid = format!("0:{}:{}", 2.0 * diff.abs(), diff.abs());
    let out = json(&run(bin()
        .arg("sensitivity")
        .arg("--data")
        .arg(&f.data)
        .arg("--schema")
        .arg(&f.schema)
        .args(["--method", "reg", "--delta-grid", &grid])));
    let curve = out["results"][0]["curve"].as_array().unwrap();
    let tau = |i: usize| curve[i]["tau_adj"].as_f64().unwrap();
    assert_eq!(tau(0), est["results"][0]["fusion"]["tau_hat"].as_f64().unwrap());
    // the curve is affine in δ with slope equal to the coefficient
    let coef = est["results"][0]["fusion"]["coefficients"][0].as_f64().unwrap();
    let step = diff.abs();
    assert!(((tau(1) - tau(0)) - coef * step).abs() < 1e-12);
    assert!(((tau(2) - tau(1)) - coef * step).abs() < 1e-12);
    if diff > 0.0 {
        let tau2 = est["results"][0]["tau2"].as_f64().unwrap();
        assert!((tau(1) - tau2).abs() < 1e-12);
    }
}

#[test]
fn bad_delta_grid() {
    let f = fixture();
    let out = run(bin()
        .arg("sensitivity")
        .arg("--data")
        .arg(&f.data)
        .arg("--schema")
        .arg(&f.schema)
        .args(["--delta-grid", "0:1"]));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn simulate_smoke_and_thread_invariance() {
    let f = fixture();
    let cfg = {
        let mut c = SimConfig::paper(300, 80, 3, 0);
        c.variance_sources = vec![acefuse::sim::SimVariance::Analytic, acefuse::sim::SimVariance::Bootstrap { b: 50 }];
        c
    };
    let path = f.root.join("sim.json");
    std::fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let go = |threads: &str| {
        run(bin().args(["--threads", threads, "simulate", "--seed", "5", "--config"]).arg(&path))
    };
    let one = go("1");
    let eight = go("8");
    assert_eq!(one.stdout, eight.stdout);
    let v = json(&one);
    assert_eq!(v["reports"][0]["estimators"].as_array().unwrap().len(), 4);
    assert_eq!(v["seed"], 5);
    let csv = f.root.join("sim.csv");
    let out = run(bin().args(["simulate", "--seed", "5", "--reps", "1", "--csv"]).arg(&csv).arg("--config").arg(&path));
    assert!(out.status.success());
    let text = std::fs::read_to_string(csv).unwrap();
    // header plus 4 estimators × 2 sources, matching has no analytic row
    assert_eq!(text.lines().count(), 1 + 7);
}

#[test]
fn simulate_requires_seed() {
    let out = run(bin().args(["simulate", "--preset", "paper"]));
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--seed"));
}
