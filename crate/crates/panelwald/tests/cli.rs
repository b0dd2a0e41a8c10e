//! End-to-end tests of the command-line interface: output files, exit codes,
//! and error handling on malformed input.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use panelwald::dsl::print_model;
use panelwald::ram::RamSystem;
use panelwald::scenarios::scenario;
use panelwald::sim::{covariance_root, generate_data, SqrtMethod};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_panelwald")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().unwrap()
}

/// Writes the analysis model and a dataset generated from the population of
/// the named scenario; returns (model path, data path).
fn fixture(dir: &Path, name: &str, n: usize) -> (PathBuf, PathBuf) {
    let sc = scenario(name).unwrap();
    let model_path = dir.join("model.txt");
    fs::write(&model_path, print_model(&sc.analysis)).unwrap();

    let sigma = sc.population_sigma().unwrap();
    let root = covariance_root(&sigma, SqrtMethod::Cholesky).unwrap();
    let pop_ram = RamSystem::build(&sc.population).unwrap();
    let names = &pop_ram.spec.catalog.observed;
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let data = generate_data(&root, n, &mut rng);
    let mut csv = names.join(",") + "\n";
    for i in 0..data.nrows() {
        let row: Vec<String> = (0..data.ncols()).map(|j| format!("{:.6}", data[(i, j)])).collect();
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    let data_path = dir.join("data.csv");
    fs::write(&data_path, csv).unwrap();
    (model_path, data_path)
}

#[test]
fn validate_reports_df_and_exits_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let (model, _) = fixture(tmp.path(), "Baseline4w", 50);
    let out = run(&["validate", "--model", model.to_str().unwrap()]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("df = 9"), "stdout: {text}");
    assert!(text.contains("rank 27/27"), "stdout: {text}");
}

#[test]
fn validate_rejects_unparseable_model() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.txt");
    fs::write(&bad, "x1 ~~~~ x2\n").unwrap();
    let out = run(&["validate", "--model", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("error"), "stderr: {err}");
}

#[test]
fn validate_rejects_empty_model() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("empty.txt");
    fs::write(&empty, "").unwrap();
    let out = run(&["validate", "--model", empty.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn fit_writes_parameter_table_and_json() {
    let tmp = tempfile::tempdir().unwrap();
    let (model, data) = fixture(tmp.path(), "Baseline4w", 1000);
    let out_dir = tmp.path().join("out");
    let out = run(&[
        "fit",
        "--model",
        model.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(out_dir.join("parameters.csv")).unwrap();
    assert!(csv.contains("parameter,estimate,se,z,p_value"));
    assert!(csv.contains("WFX2~WFX1"));
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("fit.json")).unwrap()).unwrap();
    assert_eq!(json["df"], 9);
    assert_eq!(json["converged"], true);
    assert_eq!(json["manifest"]["command"], "fit");
}

#[test]
fn fit_rejects_missing_column() {
    let tmp = tempfile::tempdir().unwrap();
    let (model, data) = fixture(tmp.path(), "Baseline4w", 100);
    // drop the first column from the header so x1 cannot be found
    let text = fs::read_to_string(&data).unwrap();
    let mangled = text.replacen("x1,", "z1,", 1);
    fs::write(&data, mangled).unwrap();
    let out = run(&[
        "fit",
        "--model",
        model.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("x1"));
}

#[test]
fn fit_rejects_too_few_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let (model, data) = fixture(tmp.path(), "Baseline4w", 100);
    let text = fs::read_to_string(&data).unwrap();
    let short: Vec<&str> = text.lines().take(5).collect();
    fs::write(&data, short.join("\n")).unwrap();
    let out = run(&[
        "fit",
        "--model",
        model.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn fit_drops_incomplete_rows_listwise() {
    let tmp = tempfile::tempdir().unwrap();
    let (model, data) = fixture(tmp.path(), "Baseline4w", 500);
    let mut lines: Vec<String> = fs::read_to_string(&data).unwrap().lines().map(String::from).collect();
    lines[3] = lines[3].replacen(|c: char| c.is_ascii_digit(), "NA", 1);
    fs::write(&data, lines.join("\n")).unwrap();
    let out = run(&[
        "fit",
        "--model",
        model.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("dropped 1 incomplete rows"));
}

#[test]
fn diagnose_recovers_omitted_direct_effect() {
    let tmp = tempfile::tempdir().unwrap();
    let (model, data) = fixture(tmp.path(), "M2_DirectEffect", 2000);
    let out_dir = tmp.path().join("diag");
    let out = run(&[
        "diagnose",
        "--model",
        model.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("WFX4~WFX2"), "stdout: {text}");
    for file in ["lm_table.csv", "stage_log.csv", "deltas.csv", "report.json"] {
        assert!(out_dir.join(file).exists(), "missing {file}");
    }
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("report.json")).unwrap()).unwrap();
    assert!(report["report"]["retained"]
        .as_array()
        .unwrap()
        .iter()
        .any(|v| v == "WFX4~WFX2"));
}

#[test]
fn diagnose_null_model_reports_nothing_retained() {
    let tmp = tempfile::tempdir().unwrap();
    let (model, data) = fixture(tmp.path(), "Baseline4w", 1000);
    let out = run(&[
        "diagnose",
        "--model",
        model.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        tmp.path().join("d").to_str().unwrap(),
    ]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("no parameters retained"));
}

#[test]
fn simulate_rejects_unknown_scenario() {
    let out = run(&["simulate", "NoSuchScenario", "--n", "100", "--reps", "2"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn simulate_list_prints_all_scenarios() {
    let out = run(&["simulate", "--list"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 12);
    assert!(text.contains("M3_Mediation"));
}

#[test]
fn replicate_table_rejects_unknown_id() {
    let out = run(&["replicate-table", "T9"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn simulate_writes_summary_files() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("sim");
    let out = run(&[
        "simulate",
        "Baseline4w",
        "--n",
        "200",
        "--reps",
        "5",
        "--seed",
        "3",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(out_dir.join("summary.csv")).unwrap();
    assert!(csv.contains("mean_chi2"));
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(json["summary"]["reps"], 5);
}
