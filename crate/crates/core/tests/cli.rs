//! End-to-end behaviour of the `msfnet` binary: outputs, exit codes,
//! determinism, resumable generation and the generate → train → evaluate →
//! predict pipeline.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use msfnet::datagen::generate_steering_config;
use msfnet::{save_config, MsfConfig, PhysicalParams, SeededRng};
use serde_json::Value;
use sha2::{Digest, Sha256};

fn msfnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msfnet"))
        .args(args)
        .env_remove("MSFNET_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = msfnet(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn digest(path: &Path) -> Vec<u8> {
    Sha256::digest(std::fs::read(path).unwrap()).to_vec()
}

fn write_config(dir: &Path, name: &str, config: &MsfConfig) -> PathBuf {
    let path = dir.join(name);
    save_config(config, &path).unwrap();
    path
}

#[test]
fn simulate_uniform_surface() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "u.json", &MsfConfig::uniform(12, 12, 8, 0).unwrap());
    let out_dir = dir.path().join("sim");
    let stdout = ok(&["simulate", "--config", s(&cfg), "--out", s(&out_dir), "--export-pattern"]);
    assert!(stdout.contains("directivity_db  26.37"), "{stdout}");
    let m = read_json(&out_dir.join("measures.json"));
    let d = m["measures"]["directivity_db"].as_f64().unwrap();
    assert!((d - 26.56).abs() < 0.5);
    assert!(out_dir.join("pattern.csv").exists());
    let log = read_json(&out_dir.join("simulate.run.json"));
    assert_eq!(log["command"], "simulate");
    assert!(log["threads"].as_u64().unwrap() >= 1);

    let fine_dir = dir.path().join("fine");
    ok(&["simulate", "--config", s(&cfg), "--out", s(&fine_dir), "--grid-res", "0.5"]);
    let fine = read_json(&fine_dir.join("measures.json"))["measures"]["directivity_db"].as_f64().unwrap();
    assert!((fine - d).abs() < 0.05);
}

#[test]
fn out_dir_defaults_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "u.json", &MsfConfig::uniform(4, 4, 8, 0).unwrap());
    let status = Command::new(env!("CARGO_BIN_EXE_msfnet"))
        .args(["simulate", "--config", s(&cfg)])
        .env("MSFNET_OUT_DIR", dir.path().join("env_out"))
        .output()
        .unwrap();
    assert!(status.status.success());
    assert!(dir.path().join("env_out/measures.json").exists());
}

#[test]
fn bad_state_is_a_validation_error_naming_the_cell() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"n_rows":2,"n_cols":2,"n_states":8,"states":[[0,1],[2,8]]}"#).unwrap();
    let out = msfnet(&["simulate", "--config", s(&path), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("row 1, col 1"), "{err}");
}

#[test]
fn zero_count_is_a_usage_error() {
    let out = msfnet(&["generate", "--count", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_dataset_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = msfnet(&[
        "train",
        "--dataset",
        s(&dir.path().join("nope.jsonl")),
        "--model",
        "mlp",
        "--out",
        s(&dir.path().join("m.json")),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn generation_is_reproducible_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    ok(&["--threads", "1", "generate", "--count", "150", "--seed", "7", "--out", s(&a), "--chunk", "40"]);
    ok(&["--threads", "1", "generate", "--count", "150", "--seed", "7", "--out", s(&b)]);
    assert_eq!(digest(&a), digest(&b));

    // Interrupt a long run once its partial file holds a few chunks, tear
    // the last line, then resume with the target count: the result must match
    // the uninterrupted file.
    let d = dir.path().join("d.jsonl");
    let partial = dir.path().join("d.jsonl.partial");
    let mut child = Command::new(env!("CARGO_BIN_EXE_msfnet"))
        .args(["generate", "--count", "100000", "--seed", "7", "--chunk", "10", "--out", s(&d)])
        .env_remove("MSFNET_OUT_DIR")
        .spawn()
        .unwrap();
    let complete_lines = |path: &Path| std::fs::read_to_string(path).map_or(0, |t| t.matches('\n').count());
    for _ in 0..3000 {
        if complete_lines(&partial) >= 40 {
            break;
        }
        std::thread::sleep(std::time::Duration::from_millis(10));
    }
    child.kill().unwrap();
    child.wait().unwrap();
    let text = std::fs::read_to_string(&partial).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines.len() >= 40);
    let mut torn = lines[..37].join("\n");
    torn.push('\n');
    torn.push_str(&lines[37][..lines[37].len() / 2]);
    std::fs::write(&partial, torn).unwrap();
    ok(&["generate", "--count", "150", "--seed", "7", "--out", s(&d), "--chunk", "40"]);
    assert_eq!(digest(&a), digest(&d));
    assert!(!partial.exists());
}

#[test]
fn pipeline_generate_train_evaluate_predict() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let ds = p.join("ds.jsonl");
    ok(&["generate", "--count", "400", "--seed", "3", "--out", s(&ds)]);

    let model = p.join("mlp.json");
    let stdout = ok(&[
        "train", "--dataset", s(&ds), "--model", "mlp", "--out", s(&model), "--max-iterations", "15",
        "--cv-lambda", "0.1,0.8", "--cv-iterations", "3", "--cv-subsample", "100", "--seed", "3",
    ]);
    assert!(stdout.contains("cv_mse"), "{stdout}");
    assert!(stdout.contains("selected lambda"), "{stdout}");
    assert!(p.join("mlp.json.cv.csv").exists());
    assert!(p.join("mlp.json.history.csv").exists());
    let meta = read_json(&model)["train_meta"].clone();
    let lambda = meta["l2_lambda"].as_f64().unwrap();
    assert!(lambda == 0.1 || lambda == 0.8);

    let eval_dir = p.join("eval");
    let stdout = ok(&[
        "evaluate", "--dataset", s(&ds), "--model", s(&model), "--out", s(&eval_dir), "--curves", "--self-test",
    ]);
    assert!(stdout.contains("perfect"), "{stdout}");
    let report = read_json(&eval_dir.join("report.json"));
    let perfect = &report["reports"][0];
    assert_eq!(perfect["model"], "perfect");
    for row in perfect["rows"].as_array().unwrap() {
        assert_eq!(row["accuracy"].as_f64(), Some(1.0), "{row}");
    }
    assert_eq!(report["reports"][1]["model"], "mlp");
    let curves = std::fs::read_to_string(eval_dir.join("curves.csv")).unwrap();
    assert!(curves.starts_with("measure,model,tolerance,accuracy"));
    assert!(eval_dir.join("report.txt").exists());
    assert!(eval_dir.join("evaluate.run.json").exists());

    let steer = write_config(p, "steer.json", &generate_steering_config(25.0, 40.0, 12, 12, 8, &PhysicalParams::default()).unwrap());
    let pred: Value = serde_json::from_str(&ok(&["predict", "--config", s(&steer), "--model", s(&model)])).unwrap();
    assert_eq!(pred["status"], "predicted");

    let mut rng = SeededRng::new(99);
    let noise = MsfConfig::new(12, 12, 8, (0..144).map(|_| rng.below(8) as u16).collect()).unwrap();
    let noise = write_config(p, "noise.json", &noise);
    let pred: Value = serde_json::from_str(&ok(&[
        "predict", "--config", s(&noise), "--model", s(&model), "--min-directivity", "30",
    ]))
    .unwrap();
    assert_eq!(pred["status"], "rejected");
    assert!(pred["analytical"]["directivity_db"].is_number());
    let pred: Value = serde_json::from_str(&ok(&[
        "predict", "--config", s(&noise), "--model", s(&model), "--min-directivity", "30", "--no-gate",
    ]))
    .unwrap();
    assert_eq!(pred["status"], "predicted");
}

#[test]
fn cnn_and_rbf_train_from_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let ds = p.join("ds.jsonl");
    ok(&["generate", "--count", "200", "--seed", "4", "--out", s(&ds)]);
    let cnn = p.join("cnn.json");
    ok(&["train", "--dataset", s(&ds), "--model", "cnn", "--out", s(&cnn), "--max-epochs", "2"]);
    let history = std::fs::read_to_string(p.join("cnn.json.history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);

    // Tabulated regression: a CSV with f*/p* columns.
    let config = generate_steering_config(10.0, 0.0, 4, 4, 8, &PhysicalParams::default()).unwrap();
    let (f, t) = msfnet::datagen::incidence_pattern_table(&config, &PhysicalParams::default(), 30, 30, 20);
    let csv = p.join("table.csv");
    msfnet::datagen::write_tabulated_patterns(std::fs::File::create(&csv).unwrap(), &f, &t).unwrap();
    let stdout = ok(&[
        "train", "--dataset", s(&csv), "--model", "rbf", "--out", s(&p.join("rbf.json")), "--spread", "0.3",
        "--max-centers", "200",
    ]);
    assert!(stdout.contains("held-out R^2"), "{stdout}");
    let err = msfnet(&["train", "--dataset", s(&csv), "--model", "cnn", "--out", s(&p.join("x.json"))]);
    assert_eq!(err.status.code(), Some(2));
}
