use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn lrt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lrt")).args(args).output().unwrap()
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("small.toml");
    fs::write(
        &path,
        "scenario = \"convergence\"\nseeds = [0, 1]\n\n[convergence]\ndims = [64, 20, 16]\nsteps = 15\nrank = 4\n",
    )
    .unwrap();
    path.display().to_string()
}

#[test]
fn convergence_writes_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("out");
    let o = lrt(&["convergence", &cfg, "--seed", "5", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("convergence_lrt_biased_seed5.csv").exists());
    assert!(!out.join("convergence_lrt_biased_seed0.csv").exists());
    assert!(String::from_utf8_lossy(&o.stdout).contains("noise_compliant"));
}

#[test]
fn missing_config_fails_with_diagnostic() {
    let o = lrt(&["run", "/nonexistent/cfg.toml"]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.starts_with("lrt: error:") && err.contains("cfg.toml"), "{err}");
}

#[test]
fn bad_config_value_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "[policy]\nrank = 0\n").unwrap();
    let o = lrt(&["run", path.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("policy"));
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let o = lrt(&["frobnicate"]);
    assert!(!o.status.success());
}
