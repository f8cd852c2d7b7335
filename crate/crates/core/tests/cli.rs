//! End-to-end runs of the `qpmerge` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use qpmerge::datastore::load_bundle;
use qpmerge::qp::base_residuals;

fn qpmerge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qpmerge"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = qpmerge(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let path = dir.join(name);
    let mut args = vec!["gen", "--out", path_str(&path)];
    args.extend_from_slice(extra);
    ok(&args);
    path
}

fn csv_rows(text: &str) -> Vec<csv::StringRecord> {
    csv::Reader::from_reader(text.as_bytes())
        .records()
        .map(|r| r.unwrap())
        .collect()
}

fn column(text: &str, name: &str) -> usize {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.headers().unwrap().iter().position(|h| h == name).unwrap()
}

fn num(s: &str) -> f64 {
    s.parse().unwrap()
}

#[test]
fn gen_is_deterministic() {
    let a = ok(&["gen", "--seed", "5", "--tasks", "2"]);
    let b = ok(&["gen", "--seed", "5", "--tasks", "2"]);
    let c = ok(&["gen", "--seed", "6", "--tasks", "2"]);
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn usage_and_io_errors_exit_two() {
    assert_eq!(qpmerge(&["bogus"]).status.code(), Some(2));
    let missing = qpmerge(&["merge", "--bundle", "/nonexistent/bundle.json"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("/nonexistent/bundle.json"));
}

#[test]
fn malformed_bundle_reports_path() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"version": 1, "base": {"layers": []}}"#).unwrap();
    let out = qpmerge(&["eval", "--bundle", path_str(&bad)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("parse error"));
}

#[test]
fn single_task_qp_recovers_tuned_model() {
    let dir = tempfile::tempdir().unwrap();
    let b = gen(dir.path(), "b.json", &["--tasks", "1"]);
    let merged = dir.path().join("m.json");
    let report = ok(&[
        "merge",
        "--bundle",
        path_str(&b),
        "--out",
        path_str(&merged),
    ]);
    let rows = csv_rows(&report);
    let mse = column(&report, "mse");
    let last = rows.last().unwrap();
    assert_eq!(&last[1], "all");
    assert!(num(&last[mse]) <= 1e-10);

    let eval = ok(&[
        "eval",
        "--bundle",
        path_str(&b),
        "--model",
        path_str(&merged),
    ]);
    let metrics: serde_json::Value = serde_json::from_str(&eval).unwrap();
    assert!(metrics["mse"].as_f64().unwrap() <= 1e-10);
}

#[test]
fn soup_report_matches_independent_eval() {
    let dir = tempfile::tempdir().unwrap();
    let b = gen(dir.path(), "b.json", &["--tasks", "3", "--noise", "0.1"]);
    let merged = dir.path().join("soup.json");
    let report = ok(&[
        "merge",
        "--bundle",
        path_str(&b),
        "--method",
        "soup",
        "--out",
        path_str(&merged),
    ]);
    let reported = num(&csv_rows(&report).last().unwrap()[column(&report, "mse")]);
    let eval = ok(&[
        "eval",
        "--bundle",
        path_str(&b),
        "--model",
        path_str(&merged),
    ]);
    let metrics: serde_json::Value = serde_json::from_str(&eval).unwrap();
    let evaluated = metrics["mse"].as_f64().unwrap();
    assert!((reported - evaluated).abs() <= 1e-12 * evaluated.max(1.0));
}

#[test]
fn qp_basis_report_has_fraction() {
    let dir = tempfile::tempdir().unwrap();
    let b = gen(dir.path(), "b.json", &["--tasks", "2"]);
    let merged = dir.path().join("m.json");
    let report = ok(&[
        "merge",
        "--bundle",
        path_str(&b),
        "--method",
        "qp-basis",
        "--basis",
        "eigen",
        "--p",
        "2",
        "--out",
        path_str(&merged),
    ]);
    let frac = column(&report, "fraction");
    let first = &csv_rows(&report)[0];
    assert_eq!(&first[0], "qp-basis:eigen:p2");
    let f = num(&first[frac]);
    assert!(f > 0.0 && f <= 1.0 + 1e-12);
}

#[test]
fn diagnose_full_eigen_basis_captures_everything() {
    let dir = tempfile::tempdir().unwrap();
    let b = gen(dir.path(), "b.json", &["--tasks", "2"]);
    let out = ok(&["diagnose", "--bundle", path_str(&b), "--families", "eigen"]);
    let (frac, gap) = (column(&out, "fraction"), column(&out, "gap"));
    let rows = csv_rows(&out);
    assert_eq!(rows.len(), 5, "eigen family stops at the output width");
    let last = rows.last().unwrap();
    assert!((num(&last[frac]) - 1.0).abs() <= 1e-10);
    assert!(num(&last[gap]).abs() <= 1e-10);
    let mse: Vec<f64> = rows
        .iter()
        .map(|r| num(&r[column(&out, "qp_mse")]))
        .collect();
    assert!(mse.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9) + 1e-15));
}

#[test]
fn eval_tuned_and_base() {
    let dir = tempfile::tempdir().unwrap();
    let b = gen(dir.path(), "b.json", &["--tasks", "2"]);
    let tuned: serde_json::Value =
        serde_json::from_str(&ok(&["eval", "--bundle", path_str(&b), "--tuned", "task1"])).unwrap();
    assert_eq!(tuned["task_mse"]["task1"].as_f64(), Some(0.0));

    let base: serde_json::Value =
        serde_json::from_str(&ok(&["eval", "--bundle", path_str(&b)])).unwrap();
    let bundle = load_bundle(&b).unwrap();
    let calib = bundle.pooled_calibration().unwrap();
    let expected: f64 = base_residuals(&bundle.base, &calib)
        .unwrap()
        .iter()
        .map(|r| r.norm_squared())
        .sum::<f64>()
        / calib.len() as f64;
    let got = base["mse"].as_f64().unwrap();
    assert!((got - expected).abs() <= 1e-12 * expected);
}

#[test]
fn compare_lists_every_method() {
    let dir = tempfile::tempdir().unwrap();
    let b = gen(dir.path(), "b.json", &["--tasks", "3", "--noise", "0.05"]);
    let out = ok(&["compare", "--bundle", path_str(&b)]);
    let methods: Vec<String> = csv_rows(&out).iter().map(|r| r[0].to_string()).collect();
    for m in [
        "base",
        "soup",
        "dare(p=0.5)",
        "ties(density=0.5)",
        "fisher",
        "qp-diag",
    ] {
        assert!(
            methods.iter().any(|x| x == m),
            "{m} missing from {methods:?}"
        );
    }
    assert!(methods.last().unwrap().starts_with("qp-basis:eigen"));
}

#[test]
fn json_report_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let b = gen(dir.path(), "b.json", &["--kind", "relu", "--seed", "3"]);
    let out = ok(&["compare", "--bundle", path_str(&b), "--format", "json"]);
    let rows: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert!(rows.as_array().unwrap().len() >= 10);
}
