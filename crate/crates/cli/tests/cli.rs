use std::path::Path;
use std::process::{Command, Output};

fn vitsvm(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vitsvm"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn vitsvm")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, epochs: usize) -> std::path::PathBuf {
    let p = dir.join("run.json");
    let body = format!(
        r#"{{"model": {{"preset": "tiny"}},
            "train": {{"epochs": {epochs}, "augment": false}},
            "data": {{"manifest": "data/manifest.csv"}},
            "output": {{"checkpoint_dir": "out"}}}}"#
    );
    std::fs::write(&p, body).unwrap();
    p
}

#[test]
fn synth_train_eval_predict() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = vitsvm(&["synth", "--out-dir", "data", "--per-class", "3", "--seed", "5", "--size", "16"], d);
    assert_eq!(o.status.code(), Some(0), "{o:?}");
    write_config(d, 1);

    let o = vitsvm(&["train", "--config", "run.json"], d);
    assert_eq!(o.status.code(), Some(0), "{o:?}");
    let log = std::fs::read_to_string(d.join("out/train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 2);

    let ck = "out/epoch-0001.ckpt";
    let o = vitsvm(&["eval", "--checkpoint", ck, "--manifest", "data/manifest.csv"], d);
    assert_eq!(o.status.code(), Some(0), "{o:?}");
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["samples"], 12);
    assert_eq!(report["classes"].as_array().unwrap().len(), 4);

    let o = vitsvm(
        &["eval", "--checkpoint", ck, "--manifest", "data/manifest.csv", "--format", "csv", "--out", "r.csv"],
        d,
    );
    assert_eq!(o.status.code(), Some(0), "{o:?}");
    assert_eq!(std::fs::read_to_string(d.join("r.csv")).unwrap().lines().count(), 6);

    let o = vitsvm(&["predict", "--checkpoint", ck, "--image", "data/c0_00000.png"], d);
    assert_eq!(o.status.code(), Some(0), "{o:?}");
    let p: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let sum: f64 = p["probs"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum();
    assert!((sum - 1.0).abs() < 1e-6);
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(vitsvm(&[], d).status.code(), Some(1));
    assert_eq!(vitsvm(&["train"], d).status.code(), Some(1));
    assert_eq!(vitsvm(&["train", "--config", "missing.json"], d).status.code(), Some(1));
    std::fs::write(d.join("bad.json"), r#"{"train": {"lr": -1}, "data": {"manifest": "m.csv"}}"#).unwrap();
    assert_eq!(vitsvm(&["train", "--config", "bad.json"], d).status.code(), Some(1));
    assert_eq!(vitsvm(&["gradcheck", "--preset", "vit-b32"], d).status.code(), Some(1));
    assert_eq!(vitsvm(&["--help"], d).status.code(), Some(0));
}

#[test]
fn runtime_failures_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("junk.ckpt"), b"nope").unwrap();
    std::fs::write(d.join("m.csv"), "path,label\n").unwrap();
    let o = vitsvm(&["eval", "--checkpoint", "junk.ckpt", "--manifest", "m.csv"], d);
    assert_eq!(o.status.code(), Some(2), "{o:?}");
    assert!(String::from_utf8_lossy(&o.stderr).contains("magic"));
}

#[test]
fn epochs_zero_and_empty_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    vitsvm(&["synth", "--out-dir", "data", "--per-class", "2", "--seed", "1", "--size", "16"], d);
    write_config(d, 0);
    let o = vitsvm(&["train", "--config", "run.json"], d);
    assert_eq!(o.status.code(), Some(0), "{o:?}");
    assert!(d.join("out/epoch-0000.ckpt").exists());
    std::fs::write(d.join("empty.csv"), "path,label\n").unwrap();
    let o = vitsvm(&["eval", "--checkpoint", "out/epoch-0000.ckpt", "--manifest", "empty.csv"], d);
    assert_ne!(o.status.code(), Some(0));
    assert!(o.stdout.is_empty());
}
