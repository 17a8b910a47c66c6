use std::path::Path;
use std::process::{Command, Output};

use fldplus::experiments::faces::{faces, FaceStyle};
use fldplus::features::{save_png, FeatureSet};
use fldplus::flow::load_flow;

fn fldplus(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fldplus")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = fldplus(args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn error_kind(out: &Output) -> String {
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    err["error"]["kind"].as_str().unwrap().to_string()
}

fn adapter() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy64.json").to_str().unwrap().into()
}

fn write_faces(dir: &Path, seed: u64, n: usize) {
    std::fs::create_dir_all(dir).unwrap();
    for (i, img) in faces(&FaceStyle::default(), seed, 0, n).iter().enumerate() {
        save_png(img, &dir.join(format!("{i:02}.png"))).unwrap();
    }
}

#[test]
fn missing_input_is_a_json_error() {
    let out = fldplus(&["extract", "--images", "/no/such/dir", "--out", "/tmp/x.fch"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!error_kind(&out).is_empty());
}

#[test]
fn bad_flags_exit_with_usage_error() {
    let out = fldplus(&["score", "--model"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_kind(&out), "usage");
}

#[test]
fn extract_train_score_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("images");
    write_faces(&images, 4, 12);
    let cache = dir.path().join("real.fch");
    let ckpt = dir.path().join("flow.ckpt");
    let (c, k) = (cache.to_str().unwrap(), ckpt.to_str().unwrap());

    ok(&["extract", "--images", images.to_str().unwrap(), "--adapter", &adapter(), "--out", c]);
    let set = FeatureSet::load(&cache).unwrap();
    assert_eq!((set.count(), set.dim()), (12, 256));
    assert!(cache.with_file_name("real.fch.json").exists());

    // zero epochs still writes the actnorm-initialized model
    ok(&["train", "--real", c, "--layers", "2", "--hidden", "16", "--epochs", "0", "--batch", "4", "--out", k]);
    let model = load_flow::<f32>(&ckpt).unwrap();
    assert!(model.is_initialized());
    assert!(dir.path().join("flow.ckpt.log.csv").exists());

    let report: serde_json::Value = serde_json::from_str(&ok(&["score", "--model", k, "--real", c, "--gen", c, "--fd"])).unwrap();
    let score = report["fld_plus"].as_f64().unwrap();
    assert!((score - std::f64::consts::E).abs() <= 1e-12, "{score}");
    assert!(report["fd_baseline"].as_f64().unwrap().abs() < 1e-3);

    let csv = ok(&["score", "--model", k, "--real", c, "--gen", c, "--format", "csv"]);
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn monotonicity_writes_one_point_per_level() {
    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("images");
    write_faces(&images, 5, 8);
    let cache = dir.path().join("real.fch");
    let ckpt = dir.path().join("flow.ckpt");
    let (c, k) = (cache.to_str().unwrap(), ckpt.to_str().unwrap());
    ok(&["extract", "--images", images.to_str().unwrap(), "--adapter", &adapter(), "--out", c]);
    ok(&["train", "--real", c, "--layers", "1", "--hidden", "8", "--epochs", "1", "--batch", "4", "--out", k]);
    let prefix = dir.path().join("mono");
    ok(&[
        "monotonicity", "--model", k, "--real", c, "--images", images.to_str().unwrap(), "--adapter", &adapter(), "--kind",
        "gaussian-noise", "--levels", "0,0.05,0.1", "--seeds", "0", "--out", prefix.to_str().unwrap(),
    ]);
    let svg = std::fs::read_to_string(dir.path().join("mono.svg")).unwrap();
    assert_eq!(svg.matches(r#"class="point""#).count(), 3);
    let csv = std::fs::read_to_string(dir.path().join("mono.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}
