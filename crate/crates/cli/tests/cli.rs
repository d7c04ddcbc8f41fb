//! End-to-end tests of the `dlss` binary: artifact layout, determinism,
//! exit codes, and the verify round trip. All runs are sized to finish in
//! seconds; the heavy defaults are exercised by the acceptance suite of the
//! core crate instead.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::tempdir;

fn dlss(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dlss"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read(path: &Path) -> String {
    fs::read_to_string(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

/// Column of a headered CSV file as floats (empty cells skipped).
fn csv_column(path: &Path, header: &str) -> Vec<f64> {
    let text = read(path);
    let mut lines = text.lines();
    let idx = lines
        .next()
        .unwrap()
        .split(',')
        .position(|h| h == header)
        .unwrap_or_else(|| panic!("no column {header} in {}", path.display()));
    lines
        .filter_map(|l| l.split(',').nth(idx))
        .filter(|c| !c.is_empty())
        .map(|c| c.parse().unwrap())
        .collect()
}

#[test]
fn run_emits_every_artifact_and_passes() {
    let dir = tempdir().unwrap();
    let out = dir.path().join("run");
    let result = dlss(&[
        "run",
        "--K", "16",
        "--tau", "1e-8",
        "--snapshots", "0,5e-8,1e-7",
        "--out", out.to_str().unwrap(),
    ]);
    assert_success(&result);

    for name in [
        "config.json",
        "trajectory_log.csv",
        "trajectory.json",
        "particles.csv",
        "particles.dat",
        "snapshot_0.csv",
        "snapshot_0.dat",
        "snapshot_5e-8.csv",
        "snapshot_1e-7.csv",
        "snapshots.csv",
        "restart.json",
        "verification.json",
    ] {
        assert!(out.join(name).exists(), "missing artifact {name}");
    }

    let config = read(&out.join("config.json"));
    assert!(config.contains("\"schema\": \"dlss.config.v1\""));
    assert!(config.contains("\"steps\": 10"));
    let verification = read(&out.join("verification.json"));
    assert!(verification.contains("\"all_satisfied\": true"));
    assert!(!out.join("error.json").exists());

    // the snapshot manifest maps every requested time onto a stored step
    let steps = csv_column(&out.join("snapshots.csv"), "step");
    assert_eq!(steps, vec![0.0, 5.0, 10.0]);
}

#[test]
fn rerun_with_same_config_is_bit_identical() {
    let dir = tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let result = dlss(&[
            "run",
            "--K", "12",
            "--tau", "1e-8",
            "--snapshots", "0,1e-7",
            "--out", out.to_str().unwrap(),
        ]);
        assert_success(&result);
    }
    for name in [
        "trajectory_log.csv",
        "trajectory.json",
        "particles.csv",
        "snapshot_1e-7.csv",
        "verification.json",
        "restart.json",
    ] {
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap(),
            "artifact {name} differs between identical runs"
        );
    }
}

#[test]
fn verify_replays_a_stored_trajectory() {
    let dir = tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let verify_dir = dir.path().join("verify");
    assert_success(&dlss(&[
        "run",
        "--K", "10",
        "--tau", "1e-8",
        "--snapshots", "0,4e-8",
        "--out", run_dir.to_str().unwrap(),
    ]));
    let result = dlss(&[
        "verify",
        run_dir.join("trajectory.json").to_str().unwrap(),
        "--out", verify_dir.to_str().unwrap(),
    ]);
    assert_success(&result);
    let verification = read(&verify_dir.join("verification.json"));
    assert!(verification.contains("\"all_satisfied\": true"));
    // the replay sees the same estimates, including the per-step decay factor
    assert!(verification.contains("entropy_decay_per_step"));
}

#[test]
fn uniform_datum_stays_put() {
    let dir = tempdir().unwrap();
    let out = dir.path().join("run");
    assert_success(&dlss(&[
        "run",
        "--datum", "uniform",
        "--K", "12",
        "--tau", "1e-7",
        "--snapshots", "0,1e-6",
        "--out", out.to_str().unwrap(),
    ]));
    let first = csv_column(&out.join("snapshot_0.csv"), "x");
    let last = csv_column(&out.join("snapshot_1e-6.csv"), "x");
    for (p, q) in first.iter().zip(&last) {
        assert!((p - q).abs() <= 1e-12, "node moved from {p} to {q}");
    }
}

#[test]
fn single_level_convergence_is_a_validation_error() {
    let dir = tempdir().unwrap();
    let out = dir.path().join("study");
    let result = dlss(&[
        "convergence",
        "--axis", "space",
        "--levels", "50",
        "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(result.status.code(), Some(1));
    let error = read(&out.join("error.json"));
    assert!(error.contains("\"schema\": \"dlss.error.v1\""));
    assert!(error.contains("at least 3 ladder levels"));
}

#[test]
fn negative_step_is_rejected_with_error_json() {
    let dir = tempdir().unwrap();
    let out = dir.path().join("run");
    let result = dlss(&["run", "--tau=-1", "--out", out.to_str().unwrap()]);
    assert_eq!(result.status.code(), Some(1));
    assert!(read(&out.join("error.json")).contains("must be positive"));
}

#[test]
fn undersized_reference_grid_is_rejected() {
    let dir = tempdir().unwrap();
    let out = dir.path().join("disc");
    let result = dlss(&[
        "discontinuous",
        "--levels", "25,50,100",
        "--ref-cells", "120",
        "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(result.status.code(), Some(1));
    assert!(read(&out.join("error.json")).contains("twice the finest level"));
}

#[test]
fn stationary_map_has_no_defect() {
    let dir = tempdir().unwrap();
    let out = dir.path().join("consistency");
    let result = dlss(&[
        "consistency",
        "--map", "stationary",
        "--levels", "8,16",
        "--out", out.to_str().unwrap(),
    ]);
    assert_success(&result);
    let defects = csv_column(&out.join("defects.csv"), "defect");
    assert_eq!(defects.len(), 2);
    assert!(defects.iter().all(|&d| d <= 1e-12));
}

#[test]
fn discontinuous_smoke_run_emits_study_and_snapshots() {
    let dir = tempdir().unwrap();
    let out = dir.path().join("disc");
    let result = dlss(&[
        "discontinuous",
        "--K", "16",
        "--tau", "1e-13",
        "--t-end", "1e-11",
        "--snapshots", "0,1e-11",
        "--levels", "8,12,16",
        "--study-t-end", "1e-12",
        "--ref-cells", "64",
        "--ref-tau", "1e-13",
        "--out", out.to_str().unwrap(),
    ]);
    // plumbing must work; the error-decay check itself may go either way at
    // this tiny scale, so accept a clean pass or a reported check failure
    assert!(
        matches!(result.status.code(), Some(0) | Some(3)),
        "unexpected exit {:?}\nstderr:\n{}",
        result.status.code(),
        String::from_utf8_lossy(&result.stderr)
    );
    for name in [
        "config.json",
        "trajectory_log.csv",
        "snapshot_0.csv",
        "snapshot_1e-11.csv",
        "errors.csv",
        "study.json",
        "verification.json",
    ] {
        assert!(out.join(name).exists(), "missing artifact {name}");
    }
    // log-scale snapshots carry the extra decade column
    let text = read(&out.join("snapshot_0.csv"));
    assert!(text.lines().next().unwrap().contains("log10z"));
    // entropy stays monotone even on the clustered, non-uniform grid
    let verification = read(&out.join("verification.json"));
    assert!(verification.contains("entropy_nonincreasing"));
}
