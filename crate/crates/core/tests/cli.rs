use std::path::Path;
use std::process::{Command, Output};

fn cpdre(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cpdre")).args(args).env_remove("CPDRE_JOBS").output().unwrap()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())).collect();
    v.sort();
    v
}

#[test]
fn list_presets_names_every_preset() {
    let o = cpdre(&["list-presets"]);
    assert!(o.status.success());
    let s = String::from_utf8(o.stdout).unwrap();
    for p in cpdre::harness::presets::PRESETS {
        assert!(s.contains(p.name));
    }
}

#[test]
fn config_errors_exit_with_1() {
    assert_eq!(cpdre(&["validate", "--preset", "nope"]).status.code(), Some(1));
    assert_eq!(cpdre(&["validate", "--preset", "tails", "--override", "params.bogus=1"]).status.code(), Some(1));
    assert_eq!(cpdre(&["validate", "--preset", "tails", "--override", "dim=7"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let o = cpdre(&["run", "--preset", "shape", "--override", "trials=5", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("surviving trials required"));
}

#[test]
fn validate_prints_diagnostics() {
    let o = cpdre(&["validate", "--preset", "duality"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("\"monotone\": true"));
}

#[test]
fn config_file_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = cpdre::harness::presets::default_config("percolation").unwrap();
    let path = dir.path().join("c.json");
    std::fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let out = dir.path().join("out");
    let o = cpdre(&["run", "--config", path.to_str().unwrap(), "--seed", "4", "--override", "trials=50", "--override", "params.levels=10", "--out", out.to_str().unwrap()]);
    assert!(o.status.code() == Some(0) || o.status.code() == Some(3));
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 4);
    assert_eq!(m["config"]["trials"], 50);
    assert_eq!(m["columns"]["percolation.csv"]["tau"], "level");
}

#[test]
fn failed_checks_exit_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = cpdre(&["run", "--preset", "oracle", "--override", "trials=200", "--override", "params.max_abs_z=0", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(dir.path().join("checks.csv").exists());
}

#[test]
fn runs_are_byte_identical_for_a_seed_and_any_job_count() {
    let d = tempfile::tempdir().unwrap();
    let run = |name: &str, seed: &str, jobs: &str| {
        let out = d.path().join(name);
        let o = cpdre(&["run", "--preset", "tails", "--seed", seed, "--jobs", jobs, "--override", "trials=300", "--override", "horizon=20", "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        files(&out)
    };
    let a = run("a", "3", "1");
    assert_eq!(a, run("b", "3", "1"));
    assert_eq!(a, run("c", "3", "3"));
    assert_ne!(a, run("d", "4", "1"));
    let names: Vec<&str> = a.iter().map(|f| f.0.as_str()).collect();
    assert_eq!(names, ["checks.csv", "extinction.csv", "late_extinction.csv", "manifest.json", "summary.csv"]);
}
