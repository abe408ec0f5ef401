use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn genforge(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_genforge")).args(args).current_dir(cwd).output().expect("binary runs")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn phantoms_are_reproducible_and_snapshot_their_config() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a.imgset", "b.imgset"] {
        let out = genforge(&["--seed", "3", "phantom", "--n", "12", "--out", name], dir.path());
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let c = genforge(&["--seed", "4", "phantom", "--n", "12", "--out", "c.imgset"], dir.path());
    assert!(c.status.success());
    let read = |n: &str| std::fs::read(dir.path().join(n)).unwrap();
    assert_eq!(read("a.imgset"), read("b.imgset"));
    assert_ne!(read("a.imgset"), read("c.imgset"));

    let cfg = read_json(&dir.path().join("a.run_config.json"));
    assert_eq!(cfg["seed"], 3);
    assert!(cfg["version"].is_string());
    assert!(cfg["command"].is_object());
}

#[test]
fn train_sample_reconstruct_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let run = |args: &[&str]| {
        let out = genforge(args, dir.path());
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    };
    run(&["phantom", "--n", "16", "--out", "ph.imgset"]);
    run(&["train", "--data", "ph.imgset", "--out", "run", "--steps", "3", "--batch", "4", "--quiet"]);
    assert!(dir.path().join("run/model.json").is_file());
    assert!(dir.path().join("run/run_config.json").is_file());
    let log = std::fs::read_to_string(dir.path().join("run/training_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);

    run(&["sample", "--model", "run", "--n", "10", "--out", "s.imgset"]);
    run(&["reconstruct", "--model", "run/model.json", "--input", "ph.imgset", "--out", "r.imgset"]);
    run(&["evaluate", "--samples", "s.imgset", "--originals", "ph.imgset", "--reconstructions", "r.imgset", "--out", "m.json"]);
    let m = read_json(&dir.path().join("m.json"));
    for key in ["dataset_similarity", "isd", "min_isd", "n_samples", "n_originals"] {
        assert!(m[key].is_number(), "missing {key} in {m}");
    }
    assert!(m["laplace"]["mean"].is_number() && m["laplace"]["std"].is_number());
    assert!(m["reconstruction"]["mse_mean"].is_number());
    assert_eq!(m["n_samples"], 10);

    run(&["evaluate", "--samples", "s.imgset", "--originals", "ph.imgset", "--out", "m2.json"]);
    assert!(read_json(&dir.path().join("m2.json")).get("reconstruction").is_none());
}

#[test]
fn gradcheck_exit_status_follows_the_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let ok = genforge(&["gradcheck", "--out", "g.json"], dir.path());
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stdout));
    let report = read_json(&dir.path().join("g.json"));
    assert!(report["results"].as_array().unwrap().iter().all(|r| r["passed"] == true));

    let strict = genforge(&["gradcheck", "--tolerance", "1e-300"], dir.path());
    assert_eq!(strict.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&strict.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "gradcheck_failed");
}

#[test]
fn usage_errors_exit_2_and_failures_exit_1_with_json() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(genforge(&["phantom"], dir.path()).status.code(), Some(2));
    assert_eq!(genforge(&["no-such-command"], dir.path()).status.code(), Some(2));

    let missing = genforge(&["evaluate", "--samples", "nope.imgset", "--originals", "nope.imgset", "--out", "m.json"], dir.path());
    assert_eq!(missing.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&missing.stderr).unwrap();
    assert!(err["error"]["kind"].is_string());
    assert!(!err["error"]["message"].as_str().unwrap().is_empty());

    let bad = genforge(&["phantom", "--n", "0", "--out", "x.imgset"], dir.path());
    assert_eq!(bad.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&bad.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "invalid_input");
}
