use std::path::Path;
use std::process::Command;

fn run(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_xray-triage"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs");
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(
        out.status.success(),
        "{args:?} failed\nstdout:\n{stdout}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    stdout
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn filter_train_eval_export() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let model = tmp.path().join("model");
    let manifest = data.join("manifest.csv");
    run(&["synth-data", "--task", "filter", "--out", s(&data), "--count", "40", "--size", "32"]);
    assert!(manifest.exists());

    let out = run(&[
        "train-filter", "--manifest", s(&manifest), "--out", s(&model), "--input-size", "16", "--max-epochs", "2",
        "--batch-size", "16",
    ]);
    assert!(out.contains("test accuracy"), "{out}");
    assert_eq!(std::fs::read_to_string(model.join("history.jsonl")).unwrap().lines().count(), 2);

    let report = tmp.path().join("report.json");
    run(&["eval", "--manifest", s(&manifest), "--model", s(&model), "--runs", "3", "--out", s(&report)]);
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(json["per_run"].as_array().unwrap().len(), 3);
    assert_eq!(json["aggregate"]["runs"], 3);

    let retrained = tmp.path().join("retrained.json");
    run(&[
        "eval", "--manifest", s(&manifest), "--model", s(&model), "--runs", "2", "--retrain", "--max-epochs", "1",
        "--spread", "sample", "--out", s(&retrained),
    ]);
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(&retrained).unwrap()).unwrap();
    assert_eq!(json["retrain"], true);
    assert_eq!(json["aggregate"]["spread"], "sample");

    let proj = tmp.path().join("projector");
    run(&["export-projector", "--model", s(&model), "--manifest", s(&manifest), "--out", s(&proj)]);
    let vectors = std::fs::read_to_string(proj.join("vectors.tsv")).unwrap();
    let metadata = std::fs::read_to_string(proj.join("metadata.tsv")).unwrap();
    assert_eq!(metadata.lines().next(), Some("label\tid"));
    assert_eq!(vectors.lines().count() + 1, metadata.lines().count());
    assert!(proj.join("pca.json").exists());
}

#[test]
fn classifier_stages_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let manifest = data.join("manifest.csv");
    run(&["synth-data", "--task", "classifier", "--out", s(&data), "--count", "12,12,6", "--size", "16"]);

    let common = ["--manifest", s(&manifest), "--input-size", "16", "--max-epochs", "1", "--batch-size", "8"];
    let stage1 = tmp.path().join("stage1");
    let mut args = vec!["train-covid", "--stage", "1", "--out", s(&stage1)];
    args.extend(common);
    run(&args);

    let stage2 = tmp.path().join("stage2");
    let mut args = vec!["train-covid", "--stage", "2", "--init", s(&stage1), "--out", s(&stage2)];
    args.extend(common);
    run(&args);
    let config = std::fs::read_to_string(stage2.join("config.json")).unwrap();
    assert!(config.contains("covid19"), "{config}");
}

#[test]
fn bad_arguments_fail_cleanly() {
    let out = Command::new(env!("CARGO_BIN_EXE_xray-triage"))
        .args(["train-covid", "--stage", "3", "--manifest", "m.csv", "--out", "o"])
        .output()
        .unwrap();
    assert!(!out.status.success());

    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_xray-triage"))
        .args(["serve", "--model-dir", s(tmp.path()), "--store-dir", s(&tmp.path().join("store")), "--port", "0"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("filter"));
}
