use std::path::{Path, PathBuf};
use std::process::Command;

fn tvs(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_tvs")).args(args).output().unwrap()
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn mean_psnr_ssim(report: &Path) -> (f64, f64) {
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(report).unwrap()).unwrap();
    let agg = &doc["aggregate"];
    (agg["mean_psnr"].as_f64().unwrap(), agg["mean_ssim"].as_f64().unwrap())
}

#[test]
fn synth_predict_evaluate_static_pan() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let pred = dir.path().join("pred");
    let report = dir.path().join("report.json");
    let s = |p: &Path| p.to_str().unwrap().to_owned();

    let out = tvs(&["synth", "--scene-config", &s(&config("static_pan.cfg")), "--out-dir", &s(&data)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(data.join("0003.png").is_file());

    let out = tvs(&["predict", "--input-dir", &s(&data), "--index", "2", "--factor", "2", "--out-dir", &s(&pred)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(pred.join("0003.png").is_file());
    assert!(pred.join("diagnostics.json").is_file());

    let out = tvs(&["evaluate", "--pred-dir", &s(&pred), "--gt-dir", &s(&data), "--report", &s(&report)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (p, _) = mean_psnr_ssim(&report);
    assert!(p > 35.0, "static scene PSNR {p}");
}

#[test]
fn evaluating_ground_truth_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let report = dir.path().join("report.json");
    let csv = dir.path().join("report.csv");
    let d = data.to_str().unwrap();
    assert!(tvs(&["synth", "--scene-config", config("moving_square.cfg").to_str().unwrap(), "--out-dir", d])
        .status
        .success());
    assert!(tvs(&["evaluate", "--pred-dir", d, "--gt-dir", d, "--report", report.to_str().unwrap()]).status.success());
    let (p, s) = mean_psnr_ssim(&report);
    assert_eq!(p, tvs_core::metrics::PSNR_CAP);
    assert!((s - 1.0).abs() < 1e-12);
    assert!(tvs(&["evaluate", "--pred-dir", d, "--gt-dir", d, "--report", csv.to_str().unwrap()]).status.success());
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("frame_index,psnr,ssim,aepe"));
    assert_eq!(text.lines().count(), 7);
}

#[test]
fn bad_arguments_fail_with_nonzero_status() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    assert!(!tvs(&["predict", "--nope"]).status.success());
    let out = tvs(&["predict", "--input-dir", d, "--index", "3", "--out-dir", d]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("predict"));
    assert!(!tvs(&["evaluate", "--pred-dir", d, "--gt-dir", d, "--crop", "x"]).status.success());
}

#[test]
fn selftest_passes() {
    let out = tvs(&["selftest"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(!String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}
