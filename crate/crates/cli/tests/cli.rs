use std::fs;
use std::process::{Command, Output};

use serde_json::Value;

fn wclb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wclb"))
        .args(args)
        .env_remove("WCLB_THREADS")
        .output()
        .expect("binary runs")
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

#[test]
fn constants_for_the_linear_drift() {
    let out = wclb(&[
        "constants",
        "--drift",
        "linear",
        "--c0",
        "1",
        "--d",
        "2",
        "--delta",
        "0.01",
        "--T",
        "4100",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&out);
    let t = 4100.0;
    // (R, c, K, d) = (1, 1, 1, 2): a = 12, alpha1 = 4862.4, h = min(c/2, a/4)
    assert_eq!(v["kappa"]["alpha1"].as_f64().unwrap(), 4862.4);
    assert_eq!(v["h"].as_f64().unwrap(), 0.5);
    let m = 1.0 + 2.0 * 4862.4 / t;
    assert!((v["m"].as_f64().unwrap() - m).abs() < 1e-12);
    assert!((v["t3"].as_f64().unwrap() - 2.0 * 4862.4).abs() < 1e-9);
    assert_eq!(v["admissible"], Value::Bool(false));
    assert_eq!(v["gates"]["t3"], Value::Bool(false));
    assert_eq!(v["T"].as_f64().unwrap(), t);
}

#[test]
fn solved_pair_is_admissible() {
    let out = wclb(&["constants", "--drift", "linear", "--d", "2"]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    assert_eq!(v["outcome"], "converged");
    assert_eq!(v["report"]["admissible"], Value::Bool(true));
}

#[test]
fn malformed_config_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, "{ \"drift\": ").unwrap();
    let out = wclb(&["constants", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("parsing config"));
}

#[test]
fn unknown_config_key_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("extra.json");
    fs::write(&path, r#"{"drift": "linear", "temperature": 3}"#).unwrap();
    let out = wclb(&["constants", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown field"));
}

#[test]
fn unknown_flag_exits_one() {
    assert_eq!(wclb(&["constants", "--temperature", "3"]).status.code(), Some(1));
    assert_eq!(wclb(&["frobnicate"]).status.code(), Some(1));
}

#[test]
fn help_exits_zero() {
    assert_eq!(wclb(&["--help"]).status.code(), Some(0));
}

#[test]
fn flags_override_config_values() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    fs::write(&path, r#"{"drift": "linear", "d": 2, "delta": 0.5, "T": 7}"#).unwrap();
    let out = wclb(&["constants", "--config", path.to_str().unwrap(), "--T", "4100"]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    assert_eq!(v["T"].as_f64().unwrap(), 4100.0);
    assert_eq!(v["delta"].as_f64().unwrap(), 0.5);
}

#[test]
fn config_for_another_experiment_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    fs::write(&path, r#"{"experiment": "verify poincare"}"#).unwrap();
    let out = wclb(&["constants", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn inadmissible_verification_exits_two_with_gates() {
    let out = wclb(&[
        "verify",
        "rho-onestep",
        "--drift",
        "linear",
        "--delta",
        "0.01",
        "--T",
        "4100",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("inadmissible"), "{err}");
    assert!(err.contains("delta4") && err.contains("FAIL"), "{err}");
}

#[test]
fn entropy_check_matches_frozen_values() {
    let out = wclb(&[
        "verify", "entropy", "--drift", "linear", "--d", "1", "--delta", "0.005", "--T", "1", "--n", "100", "--x", "0",
        "--y", "1",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&out);
    assert!((v["estimate"].as_f64().unwrap() - 0.289112194838).abs() < 1e-11);
    assert_eq!(v["bound"].as_f64().unwrap(), 1.5);
}

#[test]
fn failing_verification_exits_two() {
    // Overrides far below the true constants make the tail bound vanish.
    let out = wclb(&[
        "verify",
        "concentration",
        "--runs",
        "400",
        "--init-std",
        "0.1",
        "--u",
        "0.01",
        "--m",
        "1",
        "--theta",
        "0.99",
        "--c-local",
        "1e-12",
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("FAIL"));
}

#[test]
fn reports_do_not_depend_on_threads() {
    let run = |threads: &str| {
        let out = Command::new(env!("CARGO_BIN_EXE_wclb"))
            .args([
                "verify",
                "rho-onestep",
                "--samples",
                "2000",
                "--pairs",
                "8",
                "--seed",
                "5",
            ])
            .env("WCLB_THREADS", threads)
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(0));
        out.stdout
    };
    let one = run("1");
    assert_eq!(one, run("3"));
    assert_eq!(one, run("8"));
}

#[test]
fn out_directory_gets_report_csv_and_timing_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("reports");
    let out = wclb(&[
        "verify",
        "grad-commute",
        "--drift",
        "linear",
        "--k",
        "3",
        "--x",
        "0.2,-0.4",
        "--emit",
        "both",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_str(&fs::read_to_string(out_dir.join("grad-commute.json")).unwrap()).unwrap();
    assert_eq!(report["claim"], "grad-commute");
    assert!(report.get("runtime").is_none());
    let csv = fs::read_to_string(out_dir.join("grad-commute.csv")).unwrap();
    assert!(csv.starts_with("label"));
    let timing: Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("grad-commute.timing.json")).unwrap()).unwrap();
    assert!(timing["runtime_secs"].as_f64().unwrap() >= 0.0);
}

#[test]
fn every_report_row_carries_provenance() {
    let out = wclb(&["verify", "gaussian-base", "--samples", "2000", "--x", "0.1,0.2"]);
    let v = json(&out);
    for row in v["rows"].as_array().unwrap() {
        let kind = row["provenance"]["kind"].as_str().unwrap();
        assert!(
            ["formula", "quadrature", "monte-carlo", "numeric"].contains(&kind),
            "{kind}"
        );
        if kind == "monte-carlo" {
            assert!(row["provenance"]["n"].as_u64().unwrap() > 0);
            assert!(row["provenance"]["se"].as_f64().is_some());
        }
    }
}

#[test]
fn ot_matches_hand_assignment() {
    let dir = tempfile::tempdir().unwrap();
    let mu = dir.path().join("mu.csv");
    let nu = dir.path().join("nu.csv");
    fs::write(&mu, "x0\n0\n10\n").unwrap();
    fs::write(&nu, "x0\n11\n1\n").unwrap();
    let out = wclb(&[
        "ot",
        "--mu",
        mu.to_str().unwrap(),
        "--nu",
        nu.to_str().unwrap(),
        "--p",
        "2",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&out);
    assert_eq!(v["assignment"], serde_json::json!([1, 0]));
    assert!((v["value"].as_f64().unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn simulate_writes_coupled_csv() {
    let out = wclb(&[
        "simulate",
        "--x",
        "1,1",
        "--y",
        "-1,0",
        "--steps",
        "4",
        "--replicas",
        "2",
        "--emit",
        "csv",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "step,replica,chain,x0,x1,distance,rho");
    assert_eq!(lines.count(), 2 * 2 * 5);
}

#[test]
fn simulate_frames_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let frames = dir.path().join("cloud.bin");
    let out = wclb(&[
        "simulate",
        "--steps",
        "4",
        "--replicas",
        "5",
        "--init-std",
        "1",
        "--record-every",
        "2",
        "--frames",
        frames.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let mut file = fs::File::open(&frames).unwrap();
    for _ in 0..3 {
        let m = wclb_core::sim::EmpiricalMeasure::read_frame(&mut file).unwrap();
        assert_eq!((m.len(), m.dim()), (5, 2));
    }
}

#[test]
fn bounds_kl_exact_and_displayed_forms() {
    let out = wclb(&[
        "bounds", "kl", "--delta", "0.01", "--T", "1", "--d", "1", "--x", "0", "--y", "0.2",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&out);
    // |Δm| = 0.2 (1 - 0.01) = 0.198
    let dm2 = 0.198f64 * 0.198;
    assert!((v["exact"].as_f64().unwrap() - dm2 / 0.04).abs() < 1e-12);
    assert!((v["half_variance_form"].as_f64().unwrap() - dm2 / 0.02).abs() < 1e-12);
}

#[test]
fn bounds_ci_half_width_inverts_the_tail() {
    let base = [
        "--t-horizon",
        "10",
        "--h",
        "0.5",
        "--T",
        "1",
        "--c-init",
        "0.25",
        "--m",
        "2",
    ];
    let mut args = vec!["bounds", "ci", "--alpha", "0.05"];
    args.extend(base);
    let v = json(&wclb(&args));
    let u = v["half_width"].as_f64().unwrap();
    let u_str = format!("{u}");
    let mut args = vec!["bounds", "ci", "--u", &u_str];
    args.extend(base);
    let v = json(&wclb(&args));
    assert!((v["rows"][0]["bound"].as_f64().unwrap() - 0.05).abs() < 1e-12);
}

#[test]
fn published_schema_is_current() {
    let out = wclb(&["schema"]);
    let published = fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/config.schema.json")).unwrap();
    assert_eq!(String::from_utf8(out.stdout).unwrap(), published);
}
