//! End-to-end checks of the `exdistill` binary: directory layouts, seeded
//! byte-level determinism, the JSON error contract, and heatmap export
//! round-trips.

use std::path::Path;
use std::process::{Command, Output};

fn exdistill(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_exdistill"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

const SMALL: &str = r#"{
    "seed": 3,
    "dataset": {"class_count": 3, "train_per_class": 4,
                "val_per_class": 2, "test_per_class": 2},
    "teacher": {"epochs": 0},
    "distill": {"technique": "output", "epochs": 1, "batch_size": 4, "seed": 3}
}"#;

#[test]
fn gen_data_writes_the_documented_layout_and_is_seed_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "cfg.json", SMALL);

    let out = exdistill(&["gen-data", "--config", &cfg, "--out", "ds1"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for split in ["train", "val", "test-iid", "test-ood", "test-shift"] {
        assert!(tmp.path().join("ds1").join(split).join("images.xtsr").exists());
        assert!(tmp.path().join("ds1").join(split).join("labels.xtsr").exists());
    }
    assert!(tmp.path().join("ds1/manifest.json").exists());

    let out = exdistill(&["gen-data", "--config", &cfg, "--out", "ds2"], tmp.path());
    assert!(out.status.success());
    for file in [
        "manifest.json",
        "train/images.xtsr",
        "train/labels.xtsr",
        "test-ood/images.xtsr",
    ] {
        let a = std::fs::read(tmp.path().join("ds1").join(file)).unwrap();
        let b = std::fs::read(tmp.path().join("ds2").join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between same-seed runs");
    }

    // a different seed changes the shards
    let out = exdistill(
        &["gen-data", "--config", &cfg, "--seed", "4", "--out", "ds3"],
        tmp.path(),
    );
    assert!(out.status.success());
    let a = std::fs::read(tmp.path().join("ds1/train/images.xtsr")).unwrap();
    let b = std::fs::read(tmp.path().join("ds3/train/images.xtsr")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn invalid_shift_permutation_fails_with_json_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "bad.json",
        r#"{"dataset": {"class_count": 3, "shift_permutation": [0, 1, 2]}}"#,
    );
    let out = exdistill(&["gen-data", "--config", &cfg, "--out", "ds"], tmp.path());
    assert!(!out.status.success());
    let err: serde_json::Value =
        serde_json::from_slice(&out.stderr).expect("stderr is a JSON object");
    assert_eq!(err["error"], "contract");
    assert!(err["message"].as_str().unwrap().contains("fixed point"));
}

#[test]
fn missing_input_fails_with_json_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = exdistill(
        &["eval", "--model", "nope", "--data", "nada", "--out", "o"],
        tmp.path(),
    );
    assert!(!out.status.success());
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "io");
}

#[test]
fn pipeline_train_eval_explain_roundtrip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "cfg.json", SMALL);

    let out = exdistill(&["gen-data", "--config", &cfg, "--out", "ds"], tmp.path());
    assert!(out.status.success());

    // zero-epoch teacher = initialization checkpoint, still a valid model
    let out = exdistill(
        &["train-teacher", "--config", &cfg, "--out", "teacher"],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(tmp.path().join("teacher/checkpoint/manifest.json").exists());
    assert!(tmp.path().join("teacher/metrics.json").exists());
    assert!(tmp.path().join("teacher/metrics.csv").exists());

    let out = exdistill(
        &["eval", "--model", "teacher", "--data", "ds", "--out", "evaled"],
        tmp.path(),
    );
    assert!(out.status.success());
    let metrics: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(tmp.path().join("evaled/metrics.json")).unwrap(),
    )
    .unwrap();
    let (iid, ood, shift) = (
        metrics["iid"].as_f64().unwrap(),
        metrics["ood"].as_f64().unwrap(),
        metrics["shift"].as_f64().unwrap(),
    );
    for v in [iid, ood, shift] {
        assert!((0.0..=100.0).contains(&v));
    }
    assert_eq!(metrics["gap_iid_ood"].as_f64().unwrap(), iid - ood);
    assert_eq!(metrics["gap_iid_shift"].as_f64().unwrap(), iid - shift);

    // distill one epoch of the output baseline
    let out = exdistill(
        &[
            "distill", "--config", &cfg, "--teacher", "teacher", "--data", "ds", "--out",
            "student",
        ],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(tmp.path().join("student/checkpoint/manifest.json").exists());
    let log = std::fs::read_to_string(tmp.path().join("student/loss_log.jsonl")).unwrap();
    assert!(log.lines().count() >= 1);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["output_loss"].as_f64().unwrap().is_finite());
    }

    // explain writes png + pgm + sidecar + raw tensor; the raw tensor
    // round-trips bit-exactly
    let out = exdistill(
        &[
            "explain", "--model", "teacher", "--data", "ds", "--split", "test-iid",
            "--index", "0,1", "--method", "lrp", "--out", "maps",
        ],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let png = tmp.path().join("maps/test-iid-0000-lrp.png");
    let pgm = tmp.path().join("maps/test-iid-0000-lrp.pgm");
    let xtsr = tmp.path().join("maps/test-iid-0000-lrp.xtsr");
    let sidecar = tmp.path().join("maps/test-iid-0000-lrp.json");
    for f in [&png, &pgm, &xtsr, &sidecar] {
        assert!(f.exists(), "{} missing", f.display());
    }
    let sc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&sidecar).unwrap()).unwrap();
    assert!(sc["min"].as_f64().unwrap() <= sc["max"].as_f64().unwrap());
    assert_eq!(sc["method"], "lrp");

    let raw = std::fs::read(&xtsr).unwrap();
    let t = exdistill_core::tensor::Tensor::load_xtsr(&xtsr).unwrap();
    let mut buf = Vec::new();
    t.write_xtsr(&mut buf).unwrap();
    assert_eq!(raw, buf, "XTSR export does not round-trip bit-exactly");

    // out-of-range class is a contract error
    let out = exdistill(
        &[
            "explain", "--model", "teacher", "--data", "ds", "--index", "0", "--method",
            "lrp", "--class", "9", "--out", "maps2",
        ],
        tmp.path(),
    );
    assert!(!out.status.success());
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "contract");
}

#[test]
fn eval_rejects_class_count_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg3 = write_config(tmp.path(), "c3.json", SMALL);
    let cfg4 = write_config(
        tmp.path(),
        "c4.json",
        r#"{
            "seed": 3,
            "dataset": {"class_count": 4, "train_per_class": 4,
                        "val_per_class": 2, "test_per_class": 2},
            "teacher": {"epochs": 0}
        }"#,
    );
    assert!(exdistill(&["gen-data", "--config", &cfg4, "--out", "ds4"], tmp.path())
        .status
        .success());
    assert!(exdistill(
        &["train-teacher", "--config", &cfg3, "--out", "teacher3"],
        tmp.path()
    )
    .status
    .success());
    let out = exdistill(
        &["eval", "--model", "teacher3", "--data", "ds4", "--out", "x"],
        tmp.path(),
    );
    assert!(!out.status.success());
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "contract");
}
