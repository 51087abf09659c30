use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mdpde::{FitResult, McReport};
use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn mdpde(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mdpde"))
        .args(args)
        .env_remove("MDPDE_THREADS")
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn csv_rows(text: &str) -> Vec<Vec<String>> {
    csv::Reader::from_reader(text.as_bytes())
        .records()
        .map(|r| r.unwrap().iter().map(str::to_string).collect())
        .collect()
}

#[test]
fn fit_matches_expected_output_file() {
    let expected: Value = serde_json::from_str(&std::fs::read_to_string(fixture("normal20.expected.json")).unwrap()).unwrap();
    let data = fixture("normal20.csv");
    for case in expected["fits"].as_array().unwrap() {
        let alpha = case["alpha"].as_f64().unwrap();
        let tol = case["tolerance"].as_f64().unwrap();
        let out = mdpde(&["fit", "--family", "normal", "--alpha", &alpha.to_string(), "--data", data.to_str().unwrap()]);
        let doc = stdout_json(&out);
        let theta = &doc["result"]["theta_hat"];
        assert!((theta[0].as_f64().unwrap() - case["mu"].as_f64().unwrap()).abs() < tol, "α={alpha}: {theta}");
        assert!((theta[1].as_f64().unwrap() - case["sigma"].as_f64().unwrap()).abs() < tol, "α={alpha}: {theta}");
        if let Some(m) = case["objective"].as_f64() {
            assert!((doc["result"]["objective_value"].as_f64().unwrap() - m).abs() < 1e-8);
        }
        assert_eq!(doc["config"]["alpha"].as_f64(), Some(alpha));
        assert_eq!(doc["config"]["command"], "fit");
    }
}

#[test]
fn fit_mle_is_the_column_mean() {
    let doc = stdout_json(&mdpde(&["fit", "--family", "normal", "--alpha", "0", "--data", fixture("normal20.csv").to_str().unwrap()]));
    assert_eq!(doc["result"]["theta_hat"][0].as_f64(), Some(0.32));
}

#[test]
fn fit_document_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("fit.json");
    let status = mdpde(&[
        "fit", "--family", "normal", "--data", fixture("normal20.csv").to_str().unwrap(),
        "--out", out.to_str().unwrap(),
    ]);
    assert!(status.status.success());
    let text = std::fs::read_to_string(&out).unwrap();
    let doc: Value = serde_json::from_str(&text).unwrap();
    let result: FitResult = serde_json::from_value(doc["result"].clone()).unwrap();
    assert_eq!(serde_json::to_value(&result).unwrap(), doc["result"]);
    assert!(result.standard_errors.is_some());
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{"family": "exponential", "alpha": 0.0, "fit": {"starts": 2}}"#).unwrap();
    let doc = stdout_json(&mdpde(&[
        "fit", "--config", cfg.to_str().unwrap(), "--family", "normal",
        "--data", fixture("normal20.csv").to_str().unwrap(),
    ]));
    assert_eq!(doc["config"]["family"], "normal");
    assert_eq!(doc["config"]["fit"]["starts"], 2);
    assert_eq!(doc["result"]["starts"].as_array().unwrap().len(), 2);
    assert_eq!(doc["result"]["theta_hat"][0].as_f64(), Some(0.32));
}

#[test]
fn parse_and_config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.csv");
    std::fs::write(&empty, "").unwrap();
    let out = mdpde(&["fit", "--family", "normal", "--data", empty.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "x\n1.0\n2.0\noops\n").unwrap();
    let out = mdpde(&["fit", "--family", "normal", "--data", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 4"));

    let out = mdpde(&["fit", "--family", "cauchy", "--data", fixture("normal20.csv").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let out = mdpde(&["diagnose", "--family", "cauchy", "--theta", "0,1"]);
    assert_eq!(out.status.code(), Some(2));

    // negative observations are outside the exponential support
    let out = mdpde(&["fit", "--family", "exponential", "--data", fixture("normal20.csv").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn nonconvergence_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{"fit": {"max_iter": 1, "starts": 1}}"#).unwrap();
    let out = mdpde(&[
        "fit", "--config", cfg.to_str().unwrap(), "--family", "normal", "--alpha", "0.5",
        "--data", fixture("contaminated60.csv").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn simulate_single_replication_gives_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let out = mdpde(&[
        "simulate", "--family", "normal", "--generator", "normal(0,1)", "--n", "200", "--reps", "1",
        "--out", dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("replications.csv")).unwrap();
    assert_eq!(csv_rows(&csv).len(), 1);
    let summary: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    let report: McReport = serde_json::from_value(summary["report"].clone()).unwrap();
    assert_eq!(report.rows.len(), 1);
    assert_eq!(serde_json::to_value(&report).unwrap(), summary["report"]);
    assert_eq!(report.csv_string(), csv);
}

#[test]
fn simulate_is_deterministic_across_runs_and_threads() {
    // same output path every run, so the echoed config matches too
    let root = tempfile::tempdir().unwrap();
    let dir = root.path().join("study");
    let run = |threads: &str| {
        let out = Command::new(env!("CARGO_BIN_EXE_mdpde"))
            .args([
                "simulate", "--family", "normal", "--generator", "0.9*normal(0,1)+0.1*normal(10,1)",
                "--n", "50,100", "--reps", "12", "--seed", "7", "--study", "normality",
                "--out", dir.to_str().unwrap(),
            ])
            .env("MDPDE_THREADS", threads)
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let files = (
            std::fs::read(dir.join("replications.csv")).unwrap(),
            std::fs::read(dir.join("summary.json")).unwrap(),
        );
        std::fs::remove_dir_all(&dir).unwrap();
        files
    };
    let a = run("1");
    assert!(a == run("1"));
    assert!(a == run("3"));
}

#[test]
fn simulate_rejects_bad_generators() {
    let dir = tempfile::tempdir().unwrap();
    let out = mdpde(&[
        "simulate", "--family", "normal", "--generator", "0.5*normal(0,1)+0.4*normal(3,1)",
        "--out", dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn efficiency_sweep_at_zero_is_one() {
    let out = mdpde(&["sweep", "--family", "normal", "--theta", "0,1", "--alpha-grid", "0"]);
    assert!(out.status.success());
    let rows = csv_rows(&String::from_utf8(out.stdout).unwrap());
    assert_eq!(rows.len(), 1);
    for v in &rows[0][1..] {
        assert!((v.parse::<f64>().unwrap() - 1.0).abs() < 1e-12, "{v}");
    }
}

#[test]
fn efficiency_sweep_location_is_nonincreasing() {
    let grid = (0..=10).map(|k| format!("{}", k as f64 / 10.0)).collect::<Vec<_>>().join(",");
    let out = mdpde(&["sweep", "--family", "normal", "--theta", "0,1", "--alpha-grid", &grid]);
    let rows = csv_rows(&String::from_utf8(out.stdout).unwrap());
    assert_eq!(rows.len(), 11);
    let are: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    assert!(are.windows(2).all(|w| w[1] <= w[0]), "{are:?}");
}

#[test]
fn data_sweep_moves_toward_the_clean_center() {
    let expected: Value = serde_json::from_str(&std::fs::read_to_string(fixture("contaminated60.expected.json")).unwrap()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("path.csv");
    let grid: Vec<String> = expected["alpha_grid"].as_array().unwrap().iter().map(|v| v.to_string()).collect();
    let out = mdpde(&[
        "sweep", "--family", "normal", "--alpha-grid", &grid.join(","),
        "--data", fixture("contaminated60.csv").to_str().unwrap(), "--out", out_path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = csv_rows(&std::fs::read_to_string(&out_path).unwrap());
    let mu: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    assert!((mu[0] - expected["sample_mean"].as_f64().unwrap()).abs() < 1e-12);
    assert!(mu.windows(2).all(|w| w[1].abs() < w[0].abs()), "{mu:?}");
    let config: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("path.config.json")).unwrap()).unwrap();
    assert_eq!(config["config"]["command"], "sweep");
}

#[test]
fn sweep_rejects_unordered_grids() {
    let out = mdpde(&["sweep", "--family", "normal", "--theta", "0,1", "--alpha-grid", "0.5,0.1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn diagnose_normal_verdicts() {
    let doc = stdout_json(&mdpde(&["diagnose", "--family", "normal", "--theta", "0,1", "--alpha", "0.5"]));
    let verdicts = doc["report"]["verdicts"].as_array().unwrap();
    assert!(verdicts.iter().all(|v| v["verdict"] == "pass"), "{verdicts:?}");

    let doc = stdout_json(&mdpde(&["diagnose", "--family", "normal", "--theta", "0,1", "--alpha", "0"]));
    let score = doc["report"]["verdicts"]
        .as_array()
        .unwrap()
        .iter()
        .find(|v| v["name"] == "score_bound")
        .unwrap()
        .clone();
    assert_eq!(score["verdict"], "warn");
}

#[test]
fn diagnose_from_data_fits_first() {
    let out = mdpde(&[
        "diagnose", "--family", "normal", "--alpha", "0.5", "--format", "text",
        "--data", fixture("normal20.csv").to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("[PASS] score_bound"), "{text}");
}
