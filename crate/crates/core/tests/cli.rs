mod common;

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

use common::config_path;

fn mfw(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfw"))
        .args(args)
        .env("MFW_THREADS", "1")
        .output()
        .unwrap()
}

fn run_in(dir: &Path, args: &[&str], config: &Path) -> Output {
    let mut a: Vec<&str> = args.to_vec();
    a.extend(["--config", config.to_str().unwrap(), "--out", dir.to_str().unwrap()]);
    mfw(&a)
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn check_passes_and_manifest_is_consistent() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_in(tmp.path(), &["check"], &config_path("porous_medium.toml"));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let m = manifest(tmp.path());
    let stored = std::fs::read_to_string(tmp.path().join("config.toml")).unwrap();
    assert_eq!(m["config_hash"].as_str().unwrap(), mfw::config::hash_text(&stored));
    let outputs: Vec<&str> = m["outputs"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    for f in ["config.toml", "hypotheses.csv", "hypotheses.json"] {
        assert!(outputs.contains(&f), "{f} missing from {outputs:?}");
    }
    for f in &outputs {
        assert!(tmp.path().join(f).exists(), "{f}");
    }
    assert!(m["checks"].as_object().unwrap().values().all(|v| v == true));
    assert!(m["errors"].as_array().unwrap().is_empty());
    // the stored canonical config reproduces the hash when run again
    let again = tempfile::tempdir().unwrap();
    let out = run_in(again.path(), &["check"], &tmp.path().join("config.toml"));
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(manifest(again.path())["config_hash"], m["config_hash"]);
}

#[test]
fn failing_hypotheses_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_in(tmp.path(), &["check"], &config_path("broken/anti_dissipative.toml"));
    assert_eq!(out.status.code(), Some(1));
    let m = manifest(tmp.path());
    assert!(m["checks"].as_object().unwrap().values().any(|v| v == false));
}

#[test]
fn fast_step_violation_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_in(tmp.path(), &["simulate"], &config_path("broken/fast_step_too_large.toml"));
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("dt <= delta/20"), "{err}");
    assert!(!manifest(tmp.path())["errors"].as_array().unwrap().is_empty());
}

#[test]
fn unknown_keys_and_bad_usage_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(config_path("linear.toml")).unwrap();
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, text.replace("[run]\n", "[run]\nbogus = 1\n")).unwrap();
    let out = run_in(&tmp.path().join("o"), &["check"], &bad);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));

    assert_eq!(mfw(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(mfw(&["validate", "nothing", "--config", "x.toml"]).status.code(), Some(2));
    assert_eq!(mfw(&["check", "--config", "/nonexistent/c.toml"]).status.code(), Some(2));
    assert_eq!(mfw(&["--help"]).status.code(), Some(0));
}

#[test]
fn seed_override_is_recorded() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_in(tmp.path(), &["skeleton", "--seed", "99"], &config_path("linear.toml"));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let m = manifest(tmp.path());
    assert_eq!(m["master_seed"], 99);
    let stored = std::fs::read_to_string(tmp.path().join("config.toml")).unwrap();
    assert!(stored.contains("master_seed = 99"));
    assert_eq!(m["checks"]["energy_finite"], true);
}

#[test]
fn simulate_replays_byte_for_byte() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = common::config("cahn_hilliard.toml");
    cfg.run.n_paths = 16;
    let c = tmp.path().join("c.toml");
    std::fs::write(&c, cfg.canonical().unwrap()).unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(run_in(&a, &["simulate"], &c).status.code(), Some(0));
    assert_eq!(run_in(&b, &["simulate"], &c).status.code(), Some(0));
    for f in ["terminal.csv", "path0.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}
