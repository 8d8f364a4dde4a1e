mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use common::data_dir;

fn pchaos(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pchaos"))
        .arg("--out-dir")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn data(rel: &str) -> String {
    data_dir().join(rel).to_string_lossy().into_owned()
}

fn csv_column(text: &str, key: impl Fn(&[&str]) -> Option<String>) -> Vec<(String, String)> {
    text.lines()
        .skip(1)
        .filter_map(|l| {
            let cols: Vec<&str> = l.split(',').collect();
            key(&cols).map(|k| (k, cols[cols.len() - 1].to_string()))
        })
        .collect()
}

#[test]
fn contract_prints_eleven() {
    let tmp = tempfile::tempdir().unwrap();
    let out = pchaos(
        tmp.path(),
        &["algebra", "--op", "contract", "--f", &data("kernels/f1.toml"), "--g", &data("kernels/g1.toml"), "--r", "1", "--l", "1"],
    );
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "value = 11");
    let report = fs::read_to_string(tmp.path().join("algebra.toml")).unwrap();
    assert!(report.contains("version = \"0.1.0\""));
    assert!(report.contains("seed = 24301"));
}

#[test]
fn validation_failure_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "m = 2\norder = 2\nweights = [1.0, 1.0]\nvalues = [0.0, 1.0, 2.0, 0.0]\n").unwrap();
    let out = pchaos(tmp.path(), &["algebra", "--op", "contract", "--f", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bad.toml") && err.contains("not symmetric"), "{err}");
    let out = pchaos(tmp.path(), &["algebra", "--op", "symmetrize", "--f", bad.to_str().unwrap()]);
    assert!(out.status.success());

    let out = pchaos(tmp.path(), &["algebra", "--op", "contract", "--f", "/nonexistent/k.toml"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn work_budget_exits_three() {
    let tmp = tempfile::tempdir().unwrap();
    let out = pchaos(
        tmp.path(),
        &["simulate", "--input", &data("examples/second_chaos/manifest.toml"), "--reps", "100000000000"],
    );
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("numerical guard"));
}

#[test]
fn out_dir_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_pchaos"))
        .env("PCHAOS_OUT_DIR", tmp.path())
        .args(["bound", "--input", &data("examples/first_chaos_pair/manifest.toml")])
        .output()
        .unwrap()
        .status;
    assert!(status.success());
    assert!(tmp.path().join("bound.csv").exists());
}

#[test]
fn repeated_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let args = ["simulate", "--input", &data("examples/mixed_vector/manifest.toml"), "--reps", "3000", "--samples"];
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(pchaos(&a, &args).status.success());
    assert!(pchaos(&b, &args).status.success());
    for f in ["samples.csv", "simulate_cov.csv", "simulate.toml"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn ou_demo_writes_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let out = pchaos(
        tmp.path(),
        &["ou-demo", "--which", "Q", "--lambdas", "1,4", "--T", "200", "--reps", "2000", "--t-grid", "50,100"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["ou_demo.toml", "ou_covariance.csv", "ou_bound.csv", "ou_decay.csv"] {
        assert!(tmp.path().join(f).exists(), "{f}");
    }
    let report = fs::read_to_string(tmp.path().join("ou_demo.toml")).unwrap();
    assert!(report.contains("[config]"));
    assert!(report.contains("truncation_mass"));
    let cov = fs::read_to_string(tmp.path().join("ou_covariance.csv")).unwrap();
    assert_eq!(cov.lines().count(), 5);
}

#[test]
fn clt_check_matches_rates_table() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = data("ou/example2.toml");
    assert!(pchaos(tmp.path(), &["clt-check", "--config", &cfg]).status.success());
    assert!(pchaos(tmp.path(), &["rates", "--config", &cfg]).status.success());
    let clt = fs::read_to_string(tmp.path().join("clt_check.csv")).unwrap();
    let rates = fs::read_to_string(tmp.path().join("rates.csv")).unwrap();
    let from_clt = csv_column(&clt, |c| match c {
        [t, "2", "1", "1", _] => Some(format!("{t}/star11_second")),
        [t, "2", "2", "1", _] => Some(format!("{t}/star21_second")),
        _ => None,
    });
    let from_rates: Vec<(String, String)> = rates
        .lines()
        .skip(1)
        .filter_map(|l| {
            let c: Vec<&str> = l.split(',').collect();
            matches!(c[1], "star11_second" | "star21_second").then(|| (format!("{}/{}", c[0], c[1]), c[2].to_string()))
        })
        .collect();
    assert_eq!(from_clt.len(), 10);
    for (k, v) in &from_clt {
        let hit = from_rates.iter().find(|(k2, _)| k2 == k).unwrap_or_else(|| panic!("{k} missing"));
        assert_eq!(&hit.1, v, "{k}");
    }
}
