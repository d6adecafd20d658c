use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use noisy_cp::io::{write_dataset, CalibrationFile, ExperimentFile};
use noisy_cp::{generate, MethodKind, SynthConfig};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_noisy-cp"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth_file(dir: &Path, n: usize, k: usize) -> PathBuf {
    let path = dir.join(format!("synth_{n}_{k}.csv"));
    let pool = generate(&SynthConfig { epsilon: 0.2, ..SynthConfig::new(n, k, 17) }).unwrap().pool;
    write_dataset(&path, &pool).unwrap();
    path
}

fn read_calibration(path: &Path) -> CalibrationFile {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn calibrate_hps_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_file(dir.path(), 100, 4);
    let out = dir.path().join("cal.json");
    let o = run(&[
        "calibrate", "--dataset", s(&data), "--score", "HPS", "--alpha", "0.1",
        "--epsilon", "0.2", "--method", "NR_CP", "--output", s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let cal = read_calibration(&out);
    assert_eq!(cal.result.n, 100);
    assert!(cal.result.q.is_finite());
    assert_eq!(cal.result.epsilon, Some(0.2));
    assert_eq!(cal.config.unwrap().methods, vec![MethodKind::NrCp]);
}

#[test]
fn single_row_dataset_overflows_to_inf() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("one.csv");
    fs::write(&data, "p_0,p_1,p_2,label\n0.6,0.3,0.1,0\n").unwrap();
    let out = dir.path().join("cal.json");
    let o = run(&["calibrate", "--dataset", s(&data), "--method", "NOISY_CP", "-o", s(&out)]);
    assert!(o.status.success());
    let text = fs::read_to_string(&out).unwrap();
    assert!(text.contains(r#""q": "+inf""#), "{text}");

    let preds = run(&["predict", "--calibration", s(&out), "--dataset", s(&data)]);
    assert_eq!(String::from_utf8(preds.stdout).unwrap(), "sample_index,set_size,members\n0,3,0;1;2\n");
}

#[test]
fn invalid_rows_exit_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("bad.csv");
    fs::write(&data, "p_0,p_1,p_2,label\n0.6,0.3,0.1,0\n0.5,0.3,0.1,2\n").unwrap();
    let o = run(&["calibrate", "--dataset", s(&data), "--method", "NOISY_CP"]);
    assert_eq!(o.status.code(), Some(1));
    let diag: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(diag["error"], "dataset");
    assert!(diag["message"].as_str().unwrap().contains(":3:"));
}

#[test]
fn missing_files_are_runtime_errors() {
    let o = run(&["calibrate", "--dataset", "/nonexistent/x.csv", "--method", "NOISY_CP"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["calibrate", "--method", "NOISY_CP"]);
    assert_eq!(o.status.code(), Some(1));
}

fn write_calibration(dir: &Path, q: f64, kind: &str) -> PathBuf {
    let p = dir.join("manual.json");
    let json = serde_json::json!({
        "method": "NOISY_CP", "q": q, "alpha": 0.1, "n": 10, "k": 3,
        "score_spec": {"kind": kind, "a": 0.1, "b": 2.0, "randomized": false},
        "epsilon": null, "seed": 0, "config": null
    });
    fs::write(&p, json.to_string()).unwrap();
    p
}

#[test]
fn predict_hps_and_empty_sets() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("test.csv");
    fs::write(&data, "p_0,p_1,p_2\n0.7,0.2,0.1\n0.34,0.33,0.33\n").unwrap();
    let cal = write_calibration(dir.path(), 0.5, "HPS");
    let o = run(&["predict", "--calibration", s(&cal), "--dataset", s(&data)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        String::from_utf8(o.stdout).unwrap(),
        "sample_index,set_size,members\n0,1,0\n1,0,\n"
    );

    let o = run(&["predict", "--calibration", s(&cal), "--dataset", s(&data), "--force-nonempty"]);
    assert!(String::from_utf8(o.stdout).unwrap().ends_with("1,1,0\n"));
}

#[test]
fn predict_rejects_k_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("test.csv");
    fs::write(&data, "p_0,p_1\n0.7,0.3\n").unwrap();
    let cal = write_calibration(dir.path(), 0.5, "APS");
    let o = run(&["predict", "--calibration", s(&cal), "--dataset", s(&data)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn randomized_predictions_depend_only_on_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_file(dir.path(), 300, 5);
    let cal = dir.path().join("cal.json");
    let o = run(&[
        "calibrate", "--dataset", s(&data), "--score", "APS", "--randomized",
        "--epsilon", "0.2", "--method", "NR_CP", "--seed", "5", "-o", s(&cal),
    ]);
    assert!(o.status.success());
    let predict = |seed: &str| {
        run(&["predict", "--calibration", s(&cal), "--dataset", s(&data), "--test-seed", seed]).stdout
    };
    assert_eq!(predict("1"), predict("1"));
    assert_ne!(predict("1"), predict("2"));
}

#[test]
fn experiment_without_noise_gives_identical_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("rep.json");
    let csv = dir.path().join("rep.csv");
    let cfg = dir.path().join("cfg.json");
    fs::write(
        &cfg,
        r#"{"synth": {"n": 400, "k": 5, "seed": 3}, "epsilon": 0.0,
            "methods": ["ORACLE_CP", "NOISY_CP", "NR_CP"],
            "splits": {"n_splits": 50, "calib_fraction": 0.5}}"#,
    )
    .unwrap();
    let o = run(&["experiment", "--config", s(&cfg), "-o", s(&out), "--csv-output", s(&csv)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let file: ExperimentFile = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    let rep = file.report.unwrap();
    let oracle = rep.method(MethodKind::OracleCp).unwrap();
    let noisy = rep.method(MethodKind::NoisyCp).unwrap();
    assert_eq!(
        (oracle.mean_size, oracle.mean_coverage, oracle.mean_q),
        (noisy.mean_size, noisy.mean_coverage, noisy.mean_q)
    );
    assert_eq!(file.config.splits.n_splits, 50);

    let table = fs::read_to_string(&csv).unwrap();
    assert!(table.starts_with("method,metric,mean,std\n"));
    assert_eq!(table.lines().count(), 1 + 3 * 4);
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("rep.json");
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"synth": {"n": 200, "k": 4}, "alpha": 0.2, "splits": {"n_splits": 5}}"#).unwrap();
    let o = run(&["experiment", "--config", s(&cfg), "--alpha", "0.1", "--n-splits", "3", "-o", s(&out)]);
    assert!(o.status.success());
    let file: ExperimentFile = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(file.config.alpha, 0.1);
    assert_eq!(file.report.unwrap().config.n_splits, 3);
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"synth": {"n": 200, "k": 4}, "alhpa": 0.2}"#).unwrap();
    let o = run(&["experiment", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn sweep_emits_one_block_per_noise_level() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_file(dir.path(), 300, 4);
    let out = dir.path().join("sweep.json");
    let csv = dir.path().join("sweep.csv");
    let o = run(&[
        "sweep", "--dataset", s(&data), "--eps-grid", "0,0.1,0.3", "--n-splits", "10",
        "-o", s(&out), "--csv-output", s(&csv),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let file: ExperimentFile = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    let eps: Vec<f64> = file.sweep.unwrap().iter().map(|p| p.epsilon).collect();
    assert_eq!(eps, vec![0.0, 0.1, 0.3]);
    let table = fs::read_to_string(&csv).unwrap();
    assert!(table.starts_with("epsilon,method,metric,value\n"));
    assert_eq!(table.lines().count(), 1 + 3 * 4 * 7);

    let o = run(&["sweep", "--dataset", s(&data)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn synth_round_trips_through_the_reader() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s.csv");
    let o = run(&["synth", "--n", "50", "--k", "3", "--seed", "4", "--epsilon", "0.5", "-o", s(&out)]);
    assert!(o.status.success());
    let d = noisy_cp::io::read_dataset(&out, false).unwrap();
    let direct = generate(&SynthConfig { epsilon: 0.5, ..SynthConfig::new(50, 3, 4) }).unwrap().pool;
    assert_eq!(d.probs, direct.probs);
    assert_eq!(d.labels.unwrap(), direct.observed_labels);
    assert_eq!(d.clean_labels, direct.clean_labels);
}

#[test]
fn version_help_and_thread_env() {
    let o = run(&["--version"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("noisy-cp"));
    assert!(run(&["--help"]).status.success());
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));

    let o = bin()
        .args(["synth", "--n", "5", "--k", "2", "-o", "/dev/null"])
        .env("NOISY_CP_THREADS", "lots")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}
