use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sdcm(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdcm")).args(args).current_dir(dir).output().expect("spawn sdcm")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

const SMALL: &[&str] = &["--steps", "3", "--train-scenes", "4", "--batch-size", "2", "--eval-scenes", "2"];

#[test]
fn forward_writes_outputs_with_pyramid_strides() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&sdcm(&["gen-cube", "--seed", "0", "--out", "c.hsic", "--annotation", "a.json"], d));
    ok(&sdcm(&["forward", "--cube", "c.hsic", "--out", "f"], d));
    assert!(d.join("f/detections.json").exists());
    let shapes = fs::read_to_string(d.join("f/shapes.csv")).unwrap();
    for (stage, stride) in [("s3", "8"), ("s4", "16"), ("s5", "32")] {
        let line = shapes.lines().find(|l| l.starts_with(&format!("{stage},"))).unwrap();
        assert!(line.ends_with(&format!(",{stride}")), "{line}");
    }
    let trace: serde_json::Value = serde_json::from_slice(&fs::read(d.join("f/trace.json")).unwrap()).unwrap();
    assert!(!trace["attention"].as_array().unwrap().is_empty());
}

#[test]
fn forward_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&sdcm(&["gen-cube", "--out", "c.hsic"], d));
    ok(&sdcm(&["forward", "--cube", "c.hsic", "--out", "a", "--score-threshold", "0"], d));
    ok(&sdcm(&["forward", "--cube", "c.hsic", "--out", "b", "--score-threshold", "0"], d));
    for f in ["detections.json", "shapes.csv", "trace.json"] {
        assert_eq!(fs::read(d.join("a").join(f)).unwrap(), fs::read(d.join("b").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn missing_spectral_coverage_is_a_band_select_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&sdcm(&["gen-cube", "--out", "v.hsic", "--wavelength-max-nm", "740", "--band-threshold-nm", "700"], d));
    let out = sdcm(&["forward", "--cube", "v.hsic", "--out", "f"], d);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("band_select"));
}

#[test]
fn bad_config_value_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let out = sdcm(&["gen-cube", "--out", "x", "--topk-ratio", "1.5"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("topk_ratio"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), "version = 1\nlearning_rat = 0.1\n").unwrap();
    let out = sdcm(&["gen-cube", "--out", "x", "--config", "c.toml"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rat"));
}

#[test]
fn train_toy_is_byte_identical_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let run = |name: &str| {
        let mut args = vec!["train-toy", "--out", name];
        args.extend_from_slice(SMALL);
        ok(&sdcm(&args, d));
    };
    run("a");
    run("b");
    for f in ["loss_curve.csv", "checkpoint.sdck", "summary.json", "config.toml"] {
        assert_eq!(fs::read(d.join("a").join(f)).unwrap(), fs::read(d.join("b").join(f)).unwrap(), "{f}");
    }
    let csv = fs::read_to_string(d.join("a/loss_curve.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "step,loss_cls,loss_conf,loss_box,loss_total");
    assert_eq!(csv.lines().count(), 1 + 4);

    // Forward from the checkpoint, twice, with and without a reload in between.
    ok(&sdcm(&["gen-cube", "--seed", "3", "--out", "c.hsic"], d));
    ok(&sdcm(&["forward", "--cube", "c.hsic", "--checkpoint", "a/checkpoint.sdck", "--out", "fa"], d));
    ok(&sdcm(&["forward", "--cube", "c.hsic", "--checkpoint", "b/checkpoint.sdck", "--out", "fb"], d));
    assert_eq!(fs::read(d.join("fa/detections.json")).unwrap(), fs::read(d.join("fb/detections.json")).unwrap());
}

#[test]
fn zero_learning_rate_gives_flat_curve() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut args = vec!["train-toy", "--out", "z", "--learning-rate", "0"];
    args.extend_from_slice(SMALL);
    ok(&sdcm(&args, d));
    let csv = fs::read_to_string(d.join("z/loss_curve.csv")).unwrap();
    let totals: Vec<&str> = csv.lines().skip(1).map(|l| l.rsplit(',').next().unwrap()).collect();
    assert!(totals.windows(2).all(|w| w[0] == w[1]), "{totals:?}");
}

#[test]
fn grad_check_reports_injected_fault_for_that_op() {
    let dir = tempfile::tempdir().unwrap();
    let out = sdcm(
        &["grad-check", "--seeds", "2", "--only", "softmax,matmul", "--fault", "softmax", "--out", "r.csv"],
        dir.path(),
    );
    assert!(!out.status.success());
    let csv = fs::read_to_string(dir.path().join("r.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "op,seeds,worst_relative_error,tolerance,status");
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2);
    for r in &rows {
        assert_eq!(r.len(), 5);
        r[2].parse::<f64>().unwrap();
        let expected = if r[0] == "softmax" { "fail" } else { "pass" };
        assert_eq!(r[4], expected, "{r:?}");
    }
}

#[test]
fn grad_check_passes_for_a_subset() {
    let dir = tempfile::tempdir().unwrap();
    ok(&sdcm(&["grad-check", "--seeds", "3", "--only", "layer_norm,energy_map"], dir.path()));
}

#[test]
fn unknown_grad_check_op_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = sdcm(&["grad-check", "--only", "nope"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope"));
}

#[test]
fn flops_report_is_csv_with_decreasing_counts() {
    let dir = tempfile::tempdir().unwrap();
    let out = sdcm(&["flops", "--n-hat", "64", "--c", "16"], dir.path());
    ok(&out);
    let text = String::from_utf8(out.stdout).unwrap();
    let measured: Vec<u64> = text.lines().skip(1).map(|l| l.split(',').nth(3).unwrap().parse().unwrap()).collect();
    assert_eq!(measured.len(), 4);
    assert!(measured.windows(2).all(|w| w[0] > w[1]), "{measured:?}");
}

#[test]
fn band_importance_writes_csv_and_graymaps() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&sdcm(&["gen-cube", "--out", "c.hsic", "--bands", "8"], d));
    ok(&sdcm(&["band-importance", "--cube", "c.hsic", "--out", "bi"], d));
    let csv = fs::read_to_string(d.join("bi/importance.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 8);
    let pgm = fs::read(d.join("bi/band_000.pgm")).unwrap();
    let header = b"P5\n64 64\n255\n";
    assert_eq!(&pgm[..header.len()], header);
    assert_eq!(pgm.len(), header.len() + 64 * 64);
}

#[test]
fn usage_error_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = sdcm(&["forward"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}
