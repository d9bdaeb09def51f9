//! Drives the `fastslow` binary end to end.

use std::path::Path;
use std::process::Command;

use fastslow_cli::Manifest;

fn fastslow(config: &Path, extra: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_fastslow"))
        .arg("--config")
        .arg(config)
        .args(extra)
        .output()
        .unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn frozen_run_writes_a_complete_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "frozen.toml",
        "command = \"frozen\"\nseed = 11\n[system]\nfixture = \"lorenz\"\n[study]\nhorizon = 1.0\n",
    );
    let out = dir.path().join("out");
    let o = fastslow(&cfg, &["--out", out.to_str().unwrap(), "--threads", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = Manifest::read(&out).unwrap();
    assert!(m.complete);
    assert_eq!(m.command, "frozen");
    assert_eq!(m.seed, 11);
    assert!(m.entry("frozen.csv").is_some());
    assert!(m.entry("centering.json").is_some());
}

#[test]
fn set_overrides_reach_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "sim.toml", "command = \"simulate\"\nseed = 1\n[system]\nepsilon = 0.5\n");
    let out = dir.path().join("out");
    let o = fastslow(
        &cfg,
        &["--out", out.to_str().unwrap(), "--seed", "9", "--set", "study.horizon=0.1", "--set", "study.record_spacing=0.05"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(Manifest::read(&out).unwrap().seed, 9);
    let text = std::fs::read_to_string(out.join("trajectory.csv")).unwrap();
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn configuration_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.toml", "command = \"simulate\"\n");
    let o = fastslow(&cfg, &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("seed"));

    let cfg = write(dir.path(), "ok.toml", "command = \"simulate\"\nseed = 1\n");
    assert_eq!(fastslow(&cfg, &["--threads", "0"]).status.code(), Some(2));
    assert_eq!(fastslow(&cfg, &["--set", "study.unknown=1"]).status.code(), Some(2));
}

#[test]
fn numerical_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "cell.toml", "command = \"cell-oracle\"\nseed = 1\n[system]\nfixture = \"lorenz\"\n");
    let out = dir.path().join("out");
    let o = fastslow(&cfg, &["--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!Manifest::read(&out).unwrap().complete);
}
