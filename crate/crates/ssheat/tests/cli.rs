use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use ssheat::branch::find_am;
use ssheat::ProblemParams;

fn ssheat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ssheat")).args(args).output().expect("binary runs")
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("JSON on stdout")
}

#[test]
fn thresholds_report_mu_zero() {
    let out = ssheat(&["thresholds", "--n", "3", "--alpha", "1"]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    assert!((v["mu0"].as_f64().unwrap() - 2.0).abs() < 1e-8);
    assert_eq!(v["regime"], "BetaNeg");
    assert_eq!(v["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(v["config"]["thresholds"]["dims"]["n"], 3);
    // Identical configs give identical bytes.
    assert_eq!(out.stdout, ssheat(&["thresholds", "--n", "3", "--alpha", "1"]).stdout);
}

#[test]
fn zero_profile_csv() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.csv");
    let out = ssheat(&["profile", "--n", "3", "--alpha", "2", "--a", "0", "--csv", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(json(&out)["zeros"], 0);
    let mut rd = csv::Reader::from_path(&path).unwrap();
    assert_eq!(rd.headers().unwrap(), vec!["r", "f", "fprime"]);
    for rec in rd.records() {
        let rec = rec.unwrap();
        assert_eq!(rec[1].parse::<f64>().unwrap(), 0.0);
        assert_eq!(rec[2].parse::<f64>().unwrap(), 0.0);
    }
}

#[test]
fn exit_codes() {
    let missing = ssheat(&["thresholds", "--n", "3"]);
    assert_eq!(missing.status.code(), Some(2));
    assert_eq!(String::from_utf8_lossy(&missing.stderr).trim().lines().count(), 1);
    assert_eq!(ssheat(&["thresholds", "--n", "3", "--alpha", "9"]).status.code(), Some(2));
    assert_eq!(ssheat(&["branch", "--n", "3", "--alpha", "2", "--m", "0", "--kind", "x"]).status.code(), Some(2));
    let below = ssheat(&["thresholds", "--n", "3", "--alpha", "1", "--mu", "5"]);
    assert_eq!(below.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&below.stderr).starts_with("BelowThreshold"));
}

#[test]
fn invert_writes_energy_column_and_verdict() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.csv");
    let out = ssheat(&["invert", "--n", "3", "--alpha", "1", "--mu", "3", "--csv", path.to_str().unwrap(), "--classify"]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    assert_eq!(v["mode"], "Slow");
    let mut rd = csv::Reader::from_path(&path).unwrap();
    assert_eq!(rd.headers().unwrap(), vec!["s", "w", "wprime", "H"]);
    let first = rd.records().next().unwrap().unwrap();
    assert_eq!(first[0].parse::<f64>().unwrap(), 0.0);
    assert!((first[1].parse::<f64>().unwrap() - 3.0).abs() < 1e-8);
}

fn atlas(dir: &Path, mmax: &str, seed: &str) -> Value {
    let out = ssheat(&[
        "atlas", "--n", "3", "--alpha", "2", "--mmax", mmax, "--samples", "40", "--seed", seed, "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_str(&std::fs::read_to_string(dir.join("atlas.json")).unwrap()).unwrap()
}

#[test]
fn atlas_thresholds_and_validation() {
    let dir = tempfile::tempdir().unwrap();
    let a = atlas(dir.path(), "3", "0");
    let th = a["thresholds"].as_array().unwrap();
    assert_eq!(th.len(), 4);
    let p = ProblemParams::new(3, 2.0).unwrap();
    let mut prev = 0.0;
    for (m, b) in th.iter().enumerate() {
        let x = b["shoot"].as_f64().unwrap();
        assert!(x > prev);
        let fresh = find_am(m, &p, None, 1e-10).unwrap();
        assert!((fresh.shoot - x).abs() <= 1e-8 * x);
        prev = x;
    }
    let mut rd = csv::Reader::from_path(dir.path().join("bifurcation.csv")).unwrap();
    assert_eq!(rd.headers().unwrap(), vec!["a", "L", "N"]);
    assert_eq!(rd.records().count(), 40);

    let atlas_path = dir.path().join("atlas.json");
    let report = dir.path().join("semigroup.csv");
    let out = ssheat(&[
        "validate", "--n", "3", "--alpha", "2", "--from-atlas", atlas_path.to_str().unwrap(), "--check",
        "semigroup", "--csv", report.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(json(&out)["failed"], 0);
    let wrong = ssheat(&["validate", "--n", "3", "--alpha", "1", "--from-atlas", atlas_path.to_str().unwrap(), "--check", "semigroup"]);
    assert_eq!(wrong.status.code(), Some(2));
}

#[test]
fn atlas_does_not_depend_on_the_seed() {
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let mut a = atlas(d1.path(), "1", "0");
    let mut b = atlas(d2.path(), "1", "17");
    for v in [&mut a, &mut b] {
        v.as_object_mut().unwrap().remove("config");
    }
    assert_eq!(a, b);
    assert_eq!(
        std::fs::read(d1.path().join("bifurcation.csv")).unwrap(),
        std::fs::read(d2.path().join("bifurcation.csv")).unwrap()
    );
}
