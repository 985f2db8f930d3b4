//! End-to-end checks of the command-line interface.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fedtrust"))
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

#[test]
fn run_then_verify_roundtrip() {
    let out = tempfile::tempdir().unwrap();
    let status = bin()
        .args(["run", "--config"])
        .arg(config("blobs_chain.toml"))
        .args(["--out"])
        .arg(out.path())
        .output()
        .unwrap();
    assert!(
        status.status.success(),
        "{}",
        String::from_utf8_lossy(&status.stderr)
    );
    let stdout = String::from_utf8_lossy(&status.stdout);
    assert!(stdout.contains("final_accuracy:"), "{stdout}");

    let ledger_path = out.path().join("ledger.txt");
    assert!(out.path().join("metrics.csv").exists());
    assert!(out.path().join("summary.txt").exists());

    let verify = bin()
        .args(["verify", "--ledger"])
        .arg(&ledger_path)
        .output()
        .unwrap();
    assert!(verify.status.success());
    assert!(String::from_utf8_lossy(&verify.stdout).starts_with("VALID"));

    // One flipped hex digit must flip the verdict.
    let text = std::fs::read_to_string(&ledger_path).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let tampered_line = lines[3].replacen(|c: char| c.is_ascii_hexdigit(), "0", 1);
    let tampered_line = if tampered_line == lines[3] {
        lines[3].replacen('0', "1", 1)
    } else {
        tampered_line
    };
    lines[3] = tampered_line;
    let tampered_path = out.path().join("tampered.txt");
    std::fs::write(&tampered_path, lines.join("\n")).unwrap();
    let bad = bin()
        .args(["verify", "--ledger"])
        .arg(&tampered_path)
        .output()
        .unwrap();
    assert!(!bad.status.success());
}

#[test]
fn accountant_reports_spend_and_curve() {
    let out = bin()
        .args([
            "accountant",
            "--q",
            "0.10666666666666667",
            "--sigma",
            "2",
            "--steps",
            "200",
            "--delta",
            "1e-3",
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("epsilon: 3.496486"), "{stdout}");
    assert!(stdout.contains("optimal_alpha: 5"), "{stdout}");
    assert!(stdout.contains("alpha,eps_rdp"), "{stdout}");
    // Grid rows: 3 fractional + 63 integer + 128 + 256.
    assert_eq!(
        stdout
            .lines()
            .filter(|l| l.contains(',') && !l.contains("eps_rdp"))
            .count(),
        68
    );
}

#[test]
fn trust_bound_subcommand_evaluates_both_rules() {
    let proof = bin()
        .args([
            "trust-bound",
            "--m",
            "100",
            "--t",
            "1.0",
            "--beta",
            "0.2",
            "--rule",
            "proof",
        ])
        .output()
        .unwrap();
    assert!(proof.status.success());
    assert!(String::from_utf8_lossy(&proof.stdout).starts_with("bound:"));

    let inadmissible = bin()
        .args(["trust-bound", "--m", "100", "--t", "0.1", "--beta", "0.3"])
        .output()
        .unwrap();
    assert!(!inadmissible.status.success());
}

#[test]
fn compare_writes_an_aligned_table() {
    let out = tempfile::tempdir().unwrap();
    let status = bin()
        .args(["compare", "--config"])
        .arg(config("blobs_chain.toml"))
        .args(["--topologies", "chain,tree,star", "--out"])
        .arg(out.path())
        .output()
        .unwrap();
    assert!(
        status.status.success(),
        "{}",
        String::from_utf8_lossy(&status.stderr)
    );
    let csv = std::fs::read_to_string(out.path().join("comparison.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "kind,round,acr,accuracy,bandwidth_bytes,accepted,rejected,epsilon"
    );
    assert_eq!(csv.lines().filter(|l| l.starts_with("chain,")).count(), 10);
    assert_eq!(csv.lines().filter(|l| l.starts_with("tree,")).count(), 10);
    assert_eq!(csv.lines().filter(|l| l.starts_with("star,")).count(), 10);
}

#[test]
fn custom_topology_config_runs() {
    let out = tempfile::tempdir().unwrap();
    // The edge file path inside the config is relative to the workspace root.
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    let status = bin()
        .current_dir(&root)
        .args(["run", "--config", "configs/custom_diamond.toml", "--out"])
        .arg(out.path())
        .output()
        .unwrap();
    assert!(
        status.status.success(),
        "{}",
        String::from_utf8_lossy(&status.stderr)
    );
    assert!(String::from_utf8_lossy(&status.stdout).contains("topology: custom"));
}

#[test]
fn multi_seed_run_aggregates_replicas() {
    let out = tempfile::tempdir().unwrap();
    let status = bin()
        .args(["run", "--config"])
        .arg(config("custom_diamond.toml"))
        .args(["--seeds", "2", "--out"])
        .arg(out.path())
        .current_dir(Path::new(env!("CARGO_MANIFEST_DIR")).join("../.."))
        .output()
        .unwrap();
    assert!(
        status.status.success(),
        "{}",
        String::from_utf8_lossy(&status.stderr)
    );
    let summary = std::fs::read_to_string(out.path().join("summary.txt")).unwrap();
    assert!(summary.contains("seeds: 2"));
    assert!(summary.contains("final_accuracy_mean:"));
    assert!(out.path().join("seed-7/metrics.csv").exists());
    assert!(out.path().join("seed-8/metrics.csv").exists());
}
