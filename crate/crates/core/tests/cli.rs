//! End-to-end runs of the `modnet` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn config() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/outlier.json")
}

fn modnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_modnet")).args(args).output().expect("binary runs")
}

fn small_infer(out: &Path, workers: &str) -> Output {
    let config = config();
    modnet(&[
        "infer",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--chains",
        "3",
        "--iters",
        "400",
        "--particles",
        "5",
        "--train-samples",
        "2000",
        "--workers",
        workers,
    ])
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let path = e.unwrap().path();
            (path.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&path).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn infer_is_deterministic_across_worker_counts() {
    let (one, many) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert!(small_infer(one.path(), "1").status.success());
    assert!(small_infer(many.path(), "3").status.success());
    let files = read_dir_sorted(one.path());
    let names: Vec<_> = files.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["chain_0.csv", "chain_1.csv", "chain_2.csv", "summary.json"]);
    assert_eq!(files, read_dir_sorted(many.path()));

    let csv = String::from_utf8(files[0].1.clone()).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("iteration,a,lw_A,lw_B,total_lw,accepted"));
    assert_eq!(lines.count(), 400);
}

#[test]
fn oracle_reproduces_shipped_fixtures() {
    let out = tempfile::tempdir().unwrap();
    let config = config();
    let run = modnet(&["oracle", "--config", config.to_str().unwrap(), "--out", out.path().to_str().unwrap()]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let written = std::fs::read(out.path().join("oracle.json")).unwrap();
    let shipped = std::fs::read(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/oracle.json")).unwrap();
    assert_eq!(written, shipped);
}

#[test]
fn quick_validation_skips_statistical_criteria() {
    let config = config();
    let run = modnet(&["validate", "--quick", "--config", config.to_str().unwrap()]);
    let stdout = String::from_utf8(run.stdout).unwrap();
    assert!(run.status.success(), "{stdout}");
    for id in ["0", "1", "7", "8"] {
        assert!(stdout.lines().any(|l| l.starts_with(&format!("[PASS] {id} "))), "{stdout}");
    }
    for id in ["2", "3a", "3b", "4", "5", "6"] {
        assert!(stdout.lines().any(|l| l.starts_with(&format!("[SKIPPED] {id} "))), "{stdout}");
    }
}

#[test]
fn tampered_fixture_fails_validation() {
    let dir = tempfile::tempdir().unwrap();
    let shipped = std::fs::read_to_string(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/oracle.json")).unwrap();
    let tampered = shipped.replace("0.9786597945381488", "0.9786597945391488");
    assert_ne!(tampered, shipped);
    let path = dir.path().join("oracle.json");
    std::fs::write(&path, tampered).unwrap();
    let report = dir.path().join("report.json");
    let config = config();
    let run = modnet(&[
        "validate",
        "--quick",
        "--config",
        config.to_str().unwrap(),
        "--fixtures",
        path.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
    ]);
    assert_eq!(run.status.code(), Some(1));
    assert!(String::from_utf8(run.stdout).unwrap().contains("[FAIL] 0 "));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(report).unwrap()).unwrap();
    assert_eq!(report[0]["verdict"], "FAIL");
}

#[test]
fn configuration_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    let run = modnet(&["infer", "--config", missing.to_str().unwrap()]);
    assert_eq!(run.status.code(), Some(2));

    let bad = dir.path().join("bad.json");
    let text = std::fs::read_to_string(config()).unwrap().replace("\"chains\"", "\"chain_count\"");
    std::fs::write(&bad, text).unwrap();
    let run = modnet(&["infer", "--config", bad.to_str().unwrap()]);
    assert_eq!(run.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&run.stderr).contains("chain_count"));

    let run = modnet(&["infer", "--config", config().to_str().unwrap(), "--chains", "0", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(run.status.code(), Some(2));
}
