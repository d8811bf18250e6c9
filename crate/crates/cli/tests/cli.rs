use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn simam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_simam")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_dataset(dir: &Path) {
    let out = simam(&[
        "gen-synth",
        "--out",
        s(dir),
        "--train-per-class",
        "1",
        "--test-per-class",
        "1",
        "--size",
        "32",
        "--seed",
        "5",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

fn write_run(dir: &Path, train: &str) -> std::path::PathBuf {
    let p = dir.join("run.toml");
    fs::write(&p, format!("preset = \"desk\"\n[train]\n{train}")).unwrap();
    p
}

#[test]
fn missing_manifest_exits_2_without_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let r = simam(&["train", "--data", s(&tmp.path().join("nowhere")), "--out", s(&out)]);
    assert_eq!(code(&r), 2);
    assert!(!out.exists());
}

#[test]
fn config_errors_exit_2_and_name_the_line() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_run(tmp.path(), "epochs = 1\nbatch_size = \"eight\"\n");
    let r = simam(&["train", "--config", s(&cfg), "--data", s(tmp.path()), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(code(&r), 2);
    let err = String::from_utf8_lossy(&r.stderr);
    assert!(err.contains("line 4"), "{err}");

    let r = simam(&["cost", "--lambda", "-1"]);
    assert_eq!(code(&r), 2);
    let r = simam(&["frobnicate"]);
    assert_eq!(code(&r), 2);
}

#[test]
fn bad_labels_are_data_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    tiny_dataset(&data);
    let manifest = data.join("manifest.csv");
    let text = fs::read_to_string(&manifest).unwrap();
    let broken = text.replacen(",0,train", ",99,train", 1);
    assert_ne!(broken, text);
    fs::write(&manifest, broken).unwrap();
    let r = simam(&["train", "--data", s(&data), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(code(&r), 3, "{}", String::from_utf8_lossy(&r.stderr));
}

#[test]
fn divergence_exits_4_and_keeps_last_finite_parameters() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    tiny_dataset(&data);
    let cfg = write_run(tmp.path(), concat!(
            "epochs = 3\nimage_size = 32\n[train.optimizer]\n",
            "kind = \"sgd\"\nlr0 = 1e200\nmomentum = 0.0\nweight_decay = 0.0\nbeta1 = 0.9\nbeta2 = 0.999\neps = 1e-8\n"
        ));
    let out = tmp.path().join("o");
    let r = simam(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out)]);
    assert_eq!(code(&r), 4, "{}", String::from_utf8_lossy(&r.stderr));
    assert!(out.join("last_finite").join("params.bin").is_file());
}

#[test]
fn train_writes_artifacts_and_respects_overwrite() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    tiny_dataset(&data);
    let cfg = write_run(tmp.path(), "epochs = 1\nimage_size = 32\n");
    let out = tmp.path().join("o");
    let args = ["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out), "--lambda", "0.07"];
    assert_eq!(code(&simam(&args)), 0);
    for artifact in ["metrics.csv", "config.toml", "best/params.bin", "final/architecture.toml"] {
        assert!(out.join(artifact).exists(), "{artifact}");
    }
    let snapshot = fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(snapshot.contains("lambda = 0.07"), "{snapshot}");
    let first = fs::read(out.join("metrics.csv")).unwrap();

    assert_eq!(code(&simam(&args)), 2);
    let mut again = args.to_vec();
    again.push("--overwrite");
    assert_eq!(code(&simam(&again)), 0);
    assert_eq!(fs::read(out.join("metrics.csv")).unwrap(), first);
}

#[test]
fn cost_reports_both_formats() {
    let text = simam(&["cost", "--channels", "256", "--reduction", "4", "--kernel", "3"]);
    assert_eq!(code(&text), 0);
    let text = String::from_utf8_lossy(&text.stdout).into_owned();
    assert!(text.contains("C=256, r=4, K=3"));
    assert!(text.contains("17.871"));

    let csv = simam(&["cost", "--preset", "desk", "--format", "csv"]);
    let csv = String::from_utf8_lossy(&csv.stdout).into_owned();
    assert!(csv.starts_with("module,operators,parameters_formula,parameters\n"));
    assert!(csv.contains("\nSE,\"GAP, FC, ReLU\",2C^2/r,512\n"));
    assert!(csv.contains("\ndesk,64x64,607210,"));
}

#[test]
fn verify_passes_and_writes_a_report() {
    let tmp = tempfile::tempdir().unwrap();
    let r = simam(&["verify", "--out", s(tmp.path())]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stdout));
    let report = fs::read_to_string(tmp.path().join("verify.csv")).unwrap();
    assert_eq!(report.lines().count(), 11);
    assert!(report.lines().skip(1).all(|l| l.split(',').nth(1) == Some("true")));
}
