use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &[&str] = &[
    "particles=200",
    "window=5",
    "burn_in=2",
    "batches=5",
    "bins_x=20",
    "bins_y=15",
];

fn adaptqsd(args: &[&str], sets: &[&str], out: &Path) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_adaptqsd"));
    cmd.args(args).arg("--out").arg(out);
    for s in sets {
        cmd.args(["--set", s]);
    }
    cmd.output().expect("binary runs")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn validate_default_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = adaptqsd(&["validate"], &[], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("all required hypotheses hold"));
    let m = read_json(&dir.path().join("manifest.json"));
    assert_eq!(m["command"], "validate");
    assert_eq!(m["hypotheses_pass"], true);
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn fv_is_byte_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let out = adaptqsd(&["fv", "--seed", "7"], SMALL, d.path());
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let read = |d: &tempfile::TempDir| std::fs::read(d.path().join("alpha.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert!(!read(&a).is_empty());

    // another seed draws another sample
    let c = tempfile::tempdir().unwrap();
    adaptqsd(&["fv", "--seed", "8"], SMALL, c.path());
    assert_ne!(read(&a), read(&c));
}

#[test]
fn thread_count_does_not_change_results() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    adaptqsd(&["fv", "--threads", "1"], SMALL, a.path());
    adaptqsd(&["fv", "--threads", "2"], SMALL, b.path());
    let read = |d: &tempfile::TempDir| std::fs::read(d.path().join("alpha.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
    let hash = |d: &tempfile::TempDir| read_json(&d.path().join("manifest.json"))["config_hash"].clone();
    assert_eq!(hash(&a), hash(&b));
}

#[test]
fn diagnose_without_mutation_balances_to_v() {
    let dir = tempfile::tempdir().unwrap();
    let mut sets = SMALL.to_vec();
    sets.extend(["m_nu=0", "curve_replicates=300", "acf_replicates=100", "curve_t_max=1"]);
    let out = adaptqsd(&["diagnose"], &sets, dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let bal = read_json(&dir.path().join("balance.json"));
    assert_eq!(bal["residual"].as_f64(), Some(0.2));
    assert_eq!(bal["rhs"].as_f64(), Some(0.0));
    for f in ["convergence.csv", "truncation.csv", "rates.json", "alpha.csv"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(adaptqsd(&["validate"], &["v=oops"], dir.path()).status.code(), Some(2));
    assert_eq!(
        adaptqsd(&["validate"], &["no_such_key=1"], dir.path()).status.code(),
        Some(2)
    );
    assert_eq!(adaptqsd(&["fv"], &["burn_in=later"], dir.path()).status.code(), Some(2));
    assert_eq!(
        adaptqsd(&["validate"], &["sigma=-1"], dir.path()).status.code(),
        Some(2)
    );
    let missing = dir.path().join("nope.json");
    let out = adaptqsd(&["validate", "--config", missing.to_str().unwrap()], &[], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn partial_config_file_is_completed_from_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{ "v": 0.25, "seed": 3 }"#).unwrap();
    let out = adaptqsd(&["validate", "--config", cfg.to_str().unwrap()], &[], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let m = read_json(&dir.path().join("manifest.json"));
    assert_eq!(m["config"]["v"].as_f64(), Some(0.25));
    assert_eq!(m["seed"].as_u64(), Some(3));
}

#[test]
fn advantageous_only_in_two_dimensions_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let sets = ["dim=2", "x0=[0,0]", "fixation=advantageous_only"];
    let out = adaptqsd(&["fv"], &sets, dir.path());
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("H11"));
    assert!(!dir.path().join("alpha.csv").exists());
}

#[test]
fn oracle_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = adaptqsd(&["oracle"], &["oracle_nx=20", "oracle_ny=15"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let o = read_json(&dir.path().join("oracle.json"));
    assert!(o["lambda0"].as_f64().unwrap() > 0.0);
    let alpha = std::fs::read_to_string(dir.path().join("oracle_alpha.csv")).unwrap();
    assert_eq!(alpha.lines().count(), 1 + 20 * 15);
    assert!(alpha.starts_with("x1,y,mass"));

    let untruncated = adaptqsd(&["oracle"], &["L=null"], dir.path());
    assert_eq!(untruncated.status.code(), Some(2));
}

#[test]
fn simulate_writes_a_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let out = adaptqsd(&["simulate"], &["horizon=2", "record_every=0.1"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let csv = std::fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    assert!(csv.starts_with("t,x_1,y,n,event,w_1"));
    assert!(csv.lines().count() >= 2);
}
