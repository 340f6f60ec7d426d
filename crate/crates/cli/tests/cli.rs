//! Exit-code and output contract of the `precm` binary.

use std::fs;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_precm"))
}

#[test]
fn help_exits_zero() {
    let output = bin().arg("--help").output().unwrap();
    assert_eq!(output.status.code(), Some(0));
    let stdout = String::from_utf8(output.stdout).unwrap();
    for sub in ["pad-plan", "audit-law", "audit-net", "gen-data", "train", "eval"] {
        assert!(stdout.contains(sub), "help does not mention {sub}");
    }
}

#[test]
fn unknown_flag_exits_one() {
    let output = bin().args(["pad-plan", "--bogus"]).output().unwrap();
    assert_eq!(output.status.code(), Some(1));
}

#[test]
fn missing_required_flag_exits_one() {
    let output = bin().args(["pad-plan", "--in", "4x4"]).output().unwrap();
    assert_eq!(output.status.code(), Some(1));
}

#[test]
fn infeasible_plan_exits_two() {
    let output = bin()
        .args(["pad-plan", "--in", "8x8", "--out", "2x2", "--kernel", "3x3"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8(output.stderr).unwrap();
    assert!(stderr.contains("error:"), "{stderr}");
}

#[test]
fn unreachable_output_exits_two() {
    let output = bin()
        .args(["pad-plan", "--in", "4x4", "--out", "9x9", "--kernel", "3x3"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn malformed_extent_exits_one() {
    let output = bin()
        .args(["pad-plan", "--in", "4by4", "--out", "2x2", "--kernel", "3x3"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
}

#[test]
fn train_rejects_unknown_config_keys() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.json");
    fs::write(&config, r#"{"net": {}, "data": {}, "train": {}, "eval": {}, "extra": 1}"#).unwrap();
    let output = bin()
        .arg("train")
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(dir.path().join("model"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
}

#[test]
fn eval_without_run_config_exits_four() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("model")).unwrap();
    fs::create_dir(dir.path().join("data")).unwrap();
    let output = bin()
        .arg("eval")
        .arg("--params")
        .arg(dir.path().join("model"))
        .arg("--data")
        .arg(dir.path().join("data"))
        .arg("--report")
        .arg(dir.path().join("report.json"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(4));
}

#[test]
fn gen_data_writes_manifest_and_samples() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let status = bin()
        .args(["gen-data", "--seed", "9", "--count", "2", "--size", "16"])
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    assert!(out.join("manifest.json").is_file());
    let names: Vec<String> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names.len(), 5, "{names:?}");
}

#[test]
fn gen_data_count_zero_writes_only_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let status = bin()
        .args(["gen-data", "--seed", "9", "--count", "0", "--size", "16"])
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let names: Vec<String> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names, vec!["manifest.json".to_string()]);
}

#[test]
fn audit_law_normal_mode_exits_zero() {
    let output = bin()
        .args(["audit-law", "--trials", "5", "--seed", "2"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0));
    let stdout = String::from_utf8(output.stdout).unwrap();
    assert!(stdout.contains("failures: 0"), "{stdout}");
}
