use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use polaron_lab::{presets, ExperimentConfig, ExperimentRecord};

fn lab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_polaron-lab")).current_dir(dir).args(args).output().expect("binary runs")
}

fn small_crystal() -> ExperimentConfig {
    let mut cfg = presets::deepwell_1d();
    cfg.lattice.m = 4;
    cfg.experiment = polaron_lab::config::Experiment::Crystal {};
    cfg
}

fn record(dir: &Path) -> ExperimentRecord {
    serde_json::from_str(&fs::read_to_string(dir.join("record.json")).unwrap()).unwrap()
}

#[test]
fn lists_and_prints_presets() {
    let tmp = tempfile::tempdir().unwrap();
    let out = lab(tmp.path(), &["presets"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for p in presets::PRESETS {
        assert!(text.contains(p.name));
    }
    let out = lab(tmp.path(), &["presets", "deepwell-1d"]);
    assert!(out.status.success());
    let cfg: ExperimentConfig = toml::from_str(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(cfg, presets::deepwell_1d());
    assert_eq!(lab(tmp.path(), &["presets", "nope"]).status.code(), Some(4));
}

#[test]
fn crystal_run_writes_a_verifiable_record() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("c.toml"), small_crystal().to_toml()).unwrap();
    let out = lab(tmp.path(), &["run", "--config", "c.toml", "--out", "a"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8(out.stdout).unwrap().contains("PASS insulator"));
    let rec = record(&tmp.path().join("a"));
    assert!(!rec.crystal_cache_hit);
    assert!(tmp.path().join("a/bands.csv").exists());
    assert!(tmp.path().join("a/bands.gp").exists());

    let out = lab(tmp.path(), &["verify", "--record", "a/record.json"]);
    assert_eq!(out.status.code(), Some(0));

    let again = lab(tmp.path(), &["run", "--config", "c.toml", "--out", "b"]);
    assert_eq!(again.status.code(), Some(0));
    assert!(record(&tmp.path().join("b")).crystal_cache_hit);
    assert_eq!(fs::read(tmp.path().join("a/bands.csv")).unwrap(), fs::read(tmp.path().join("b/bands.csv")).unwrap());

    let fresh = lab(tmp.path(), &["run", "--config", "c.toml", "--out", "c", "--no-cache"]);
    assert_eq!(fresh.status.code(), Some(0));
    assert!(!record(&tmp.path().join("c")).crystal_cache_hit);

    fs::write(tmp.path().join("a/bands.csv"), "kx,band_0\n0,0\n").unwrap();
    let out = lab(tmp.path(), &["verify", "--record", "a/record.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stdout).unwrap().contains("MISMATCH"));
}

#[test]
fn free_preset_is_rejected_as_metallic() {
    let tmp = tempfile::tempdir().unwrap();
    let out = lab(tmp.path(), &["run", "--config", "free", "--out", "free"]);
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn malformed_config_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("bad.toml"), "seed = \"x\"\n").unwrap();
    assert_eq!(lab(tmp.path(), &["run", "--config", "bad.toml"]).status.code(), Some(4));
    let mut cfg = small_crystal();
    cfg.lattice.n_c = 0;
    fs::write(tmp.path().join("zero.toml"), cfg.to_toml()).unwrap();
    assert_eq!(lab(tmp.path(), &["run", "--config", "zero.toml"]).status.code(), Some(4));
}
