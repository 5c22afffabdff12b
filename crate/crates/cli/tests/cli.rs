use std::process::Command;

fn lift3d(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_lift3d")).args(args).output().expect("run lift3d")
}

#[test]
fn help_exits_zero() {
    let out = lift3d(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["build-dataset", "train-stage1", "train-stage2", "sample-views", "distill", "render-turntable", "eval"] {
        assert!(text.contains(cmd), "help lacks {cmd}");
    }
}

#[test]
fn unknown_flag_is_a_usage_error_naming_the_flag() {
    let out = lift3d(&["build-dataset", "--out", "x", "--bogus-flag"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--bogus-flag"), "{err}");
    let v: serde_json::Value = serde_json::from_str(err.trim()).expect("one JSON line");
    assert_eq!(v["error"], "usage");
}

#[test]
fn bad_override_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("d");
    let out = lift3d(&["build-dataset", "--out", out_dir.to_str().unwrap(), "--set", "dataset.objects=\"x\""]);
    assert_eq!(out.status.code(), Some(1));
    let v: serde_json::Value = serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
    assert_eq!(v["error"], "config");
    assert!(v["message"].as_str().unwrap().contains("dataset.objects"));
}

#[test]
fn set_overrides_reach_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("d");
    let out = lift3d(&[
        "build-dataset",
        "--preset",
        "tiny",
        "--out",
        out_dir.to_str().unwrap(),
        "--set",
        "dataset.objects=2",
        "--set",
        "seed=17",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(out_dir.join("run_manifest.json")).unwrap();
    let m: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(m["config"]["dataset"]["objects"], 2);
    assert_eq!(m["config"]["seed"], 17);
    assert!(m["artifacts"].as_array().unwrap().iter().any(|a| a["path"] == "dataset_manifest.json"));
}

#[test]
fn units_suite_passes_from_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("units.json");
    let out = lift3d(&["eval", "--suite", "units", "--out", report.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 5);
    assert!(report.is_file());
}

#[test]
fn missing_input_is_reported_as_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = lift3d(&[
        "render-turntable",
        "--field",
        dir.path().join("nope.ckpt").to_str().unwrap(),
        "--out",
        dir.path().join("t").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let v: serde_json::Value = serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
    assert!(v["error"].is_string() && v["message"].is_string());
}
