//! End-to-end checks of the binary: exit codes, file outputs, determinism,
//! and agreement with the library on the same inputs.

use perfport::dataset::AnalysisDataset;
use perfport::metrics::{EstimatorKind, MetricId};
use perfport::run::{run_evaluate, RunConfig};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const DATA_CSV: &str = "\
source,y,weight,score,x1
0,,1.0,0.62,0.1
0,,1.0,0.35,-0.5
0,,1.0,0.71,0.9
0,,1.0,0.44,0.0
0,,1.0,0.52,0.4
1,1,1.0,0.80,1.2
1,0,1.0,0.30,0.8
1,1,1.0,0.65,-0.6
1,0,1.0,0.41,0.5
1,1,1.0,0.58,-0.2
2,0,1.0,0.41,-0.1
2,1,1.0,0.77,-1.0
2,0,1.0,0.22,1.4
2,1,1.0,0.49,0.2
2,0,1.0,0.66,-0.3
";

fn workdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!(
        "perfport-cli-{tag}-{}",
        std::process::id()
    ));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_perfport"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn exit_code(output: &Output) -> i32 {
    output.status.code().expect("exit code")
}

#[test]
fn evaluate_matches_library_and_is_deterministic() {
    let dir = workdir("evaluate");
    std::fs::write(dir.join("data.csv"), DATA_CSV).unwrap();
    let config_text = r#"{
        "seed": 5,
        "threshold": {"rule": "fixed", "c": 0.5},
        "metrics": ["sensitivity", "specificity", "auc"],
        "estimators": ["om", "w", "source"]
    }"#;
    std::fs::write(dir.join("config.json"), config_text).unwrap();

    let out = run(
        &["evaluate", "--config", "config.json", "--data", "data.csv", "--out", "a"],
        &dir,
    );
    assert_eq!(exit_code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    for file in ["results.json", "results.csv", "provenance.json"] {
        assert!(dir.join("a").join(file).exists(), "missing {file}");
    }

    // Same inputs through the library agree cell by cell.
    let config = RunConfig::from_json(config_text).unwrap();
    let ds = AnalysisDataset::<f64>::from_csv_reader(DATA_CSV.as_bytes()).unwrap();
    let bundle = run_evaluate(&config, &ds).unwrap();
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("a/results.json")).unwrap())
            .unwrap();
    let cells = json["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 9);
    for (cell, expected) in cells.iter().zip(&bundle.cells) {
        let value = cell["estimate"].as_f64().unwrap();
        assert!((value - expected.estimate.unwrap()).abs() < 1e-15);
    }
    let sens_om = bundle
        .cells
        .iter()
        .find(|c| c.metric == MetricId::Sensitivity && c.estimator == EstimatorKind::Source)
        .unwrap()
        .estimate
        .unwrap();
    // Source sensitivity on this file: 4 of 5 positive study rows above 0.5.
    assert!((sens_om - 0.8).abs() < 1e-12);

    // Re-running is byte-identical.
    let rerun = run(
        &["evaluate", "--config", "config.json", "--data", "data.csv", "--out", "b"],
        &dir,
    );
    assert_eq!(exit_code(&rerun), 0);
    assert_eq!(
        std::fs::read(dir.join("a/results.json")).unwrap(),
        std::fs::read(dir.join("b/results.json")).unwrap()
    );
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn exit_codes_distinguish_failure_phases() {
    let dir = workdir("exits");
    std::fs::write(dir.join("data.csv"), DATA_CSV).unwrap();

    // Unknown config field: configuration error.
    std::fs::write(dir.join("bad.json"), r#"{"sead": 1}"#).unwrap();
    let out = run(&["evaluate", "--config", "bad.json", "--data", "data.csv"], &dir);
    assert_eq!(exit_code(&out), 2);

    // Missing data file: data error.
    let out = run(&["evaluate", "--data", "nope.csv"], &dir);
    assert_eq!(exit_code(&out), 3);

    // Invalid outcome value in the data: data error.
    std::fs::write(dir.join("badrow.csv"), "source,y,x1\n0,,0.1\n1,yes,0.2\n").unwrap();
    let out = run(&["evaluate", "--data", "badrow.csv"], &dir);
    assert_eq!(exit_code(&out), 3);

    // Degenerate scores under the Youden rule: estimation failure.
    let constant = "source,y,score,x1\n0,,0.5,0.1\n1,1,0.5,0.2\n1,0,0.5,-0.1\n";
    std::fs::write(dir.join("flat.csv"), constant).unwrap();
    let out = run(&["evaluate", "--data", "flat.csv"], &dir);
    assert_eq!(exit_code(&out), 4);
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn simulate_smoke_emits_all_regime_rows() {
    let dir = workdir("simulate");
    let config = r#"{
        "seed": 30,
        "simulation": {
            "dgp": {"n": 400, "replicates": 5, "oracle_draws": 30000, "seed": 30},
            "regimes": ["both_correct", "both_wrong"]
        }
    }"#;
    std::fs::write(dir.join("config.json"), config).unwrap();
    let out = run(&["simulate", "--config", "config.json", "--out", "sim"], &dir);
    assert_eq!(exit_code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.join("sim/results.csv")).unwrap();
    assert!(csv.starts_with("# config_hash="));
    assert!(csv.lines().nth(1).unwrap().starts_with("metric,estimator,regime,"));
    for regime in ["both_correct", "both_wrong"] {
        // 6 metrics x 4 estimators per regime.
        assert_eq!(csv.matches(regime).count(), 24, "rows for {regime}");
    }
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn tilt_scan_and_calibrate_produce_tables() {
    let dir = workdir("tilt");
    std::fs::write(dir.join("data.csv"), DATA_CSV).unwrap();
    let config = r#"{
        "seed": 6,
        "threshold": {"rule": "fixed", "c": 0.5},
        "tilt": {"grid": [-0.5, 0.0, 0.5], "target_prevalence": 0.55}
    }"#;
    std::fs::write(dir.join("config.json"), config).unwrap();

    let out = run(
        &["tilt-scan", "--config", "config.json", "--data", "data.csv", "--out", "scan"],
        &dir,
    );
    assert_eq!(exit_code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.join("scan/results.csv")).unwrap();
    assert!(csv.starts_with("# config_hash="));
    assert!(csv.lines().nth(1).unwrap().starts_with("study,gamma,psi_sens"));
    assert_eq!(csv.lines().count(), 8); // hash, header, 2 studies x 3 gammas

    let out = run(
        &["calibrate", "--config", "config.json", "--data", "data.csv", "--out", "cal"],
        &dir,
    );
    assert_eq!(exit_code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.join("cal/results.csv")).unwrap();
    assert!(csv.lines().last().unwrap().starts_with("combined"));
    let _ = std::fs::remove_dir_all(&dir);
}
