use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TOY: &str = r#"seed = 3
horizon = 10
runs = 20

[system]
A = [[1.2, 0.0], [0.1, 0.5]]
Q = [[0.1, 0.0], [0.0, 0.1]]

[[party]]
C = [[1.0, 0.0], [0.0, 1.0]]
R = [[0.2, 0.0], [0.0, 0.2]]

[design]
method = "norm"
"#;

fn secfuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_secfuse")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("exp.toml");
    fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn invertible_single_party_norm_design_is_accepted_and_simulates() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TOY);
    let out = dir.path().join("out");
    let o = secfuse(&["design", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let gains: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("gains_norm.json")).unwrap()).unwrap();
    assert_eq!(gains["accepted"], true);
    assert!(gains["average_norm"].as_f64().unwrap() < 1e-12);

    let o = secfuse(&["simulate", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let cov = fs::read_to_string(out.join("covariance.csv")).unwrap();
    assert_eq!(cov.lines().count(), 12);
    assert!(cov.starts_with("k,tr_deterministic,tr_empirical,runs\n"));

    let o = secfuse(&["analyze", s(&out)]);
    assert!(o.status.success());
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.contains("norm.accepted") && table.contains("tr_empirical_final"), "{table}");
}

#[test]
fn zero_horizon_writes_header_only_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &TOY.replace("horizon = 10", "horizon = 0"));
    let out = dir.path().join("out");
    assert!(secfuse(&["design", "--config", s(&cfg), "--out", s(&out)]).status.success());
    let o = secfuse(&["simulate", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(out.join("trajectory.csv")).unwrap(), "k,x_1,x_2,xbar_1,xbar_2\n");
    assert_eq!(fs::read_to_string(out.join("covariance.csv")).unwrap().lines().count(), 1);
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TOY);
    let mut files = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        assert!(secfuse(&["design", "--config", s(&cfg), "--out", s(&out)]).status.success());
        assert!(secfuse(&["simulate", "--config", s(&cfg), "--out", s(&out)]).status.success());
        files.push(["gains_norm.json", "trajectory.csv", "covariance.csv"].map(|f| fs::read(out.join(f)).unwrap()));
    }
    assert_eq!(files[0], files[1]);
}

#[test]
fn encrypted_simulation_matches_plaintext() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TOY);
    let out = dir.path().join("out");
    let keys = dir.path().join("keys");
    assert!(secfuse(&["keygen", "--bits", "256", "--out", s(&keys), "--insecure-small-keys"]).status.success());
    assert!(secfuse(&["design", "--config", s(&cfg), "--out", s(&out)]).status.success());
    let o = secfuse(&[
        "simulate",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--mode",
        "enc-inproc",
        "--keys",
        s(&keys.join("private_key.json")),
        "--insecure-small-keys",
        "--compare-modes",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let diff = fs::read_to_string(out.join("mode_diff.csv")).unwrap();
    let worst = diff.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse::<f64>().unwrap()).fold(0.0, f64::max);
    assert!(worst <= 1e-6, "{worst}");
}

#[test]
fn keygen_reports_the_requested_modulus_size() {
    let dir = tempfile::tempdir().unwrap();
    let o = secfuse(&["keygen", "--bits", "128", "--out", s(dir.path())]);
    assert!(!o.status.success(), "small keys need the explicit flag");
    let o = secfuse(&["keygen", "--bits", "128", "--out", s(dir.path()), "--insecure-small-keys"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("modulus bits      128"));
    assert!(dir.path().join("public_key.json").exists() && dir.path().join("private_key.json").exists());
}

#[test]
fn analyze_without_outputs_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = secfuse(&["analyze", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_errors_name_file_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &TOY.replace("R = [[0.2, 0.0], [0.0, 0.2]]", "R = [[0.2, 0.0], [0.0, -0.2]]"));
    let o = secfuse(&["design", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("exp.toml:11:"), "{err}");
}

#[test]
fn golden_misses_fail_the_analysis() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TOY);
    let out = dir.path().join("out");
    assert!(secfuse(&["design", "--config", s(&cfg), "--out", s(&out)]).status.success());
    let golden = dir.path().join("golden.toml");
    fs::write(&golden, "[[row]]\nmetric = \"norm.accepted\"\nexpected = 1\nlower = 1\nupper = 1.5\n").unwrap();
    assert!(secfuse(&["analyze", s(&out), "--golden", s(&golden)]).status.success());
    fs::write(&golden, "[[row]]\nmetric = \"norm.accepted\"\nexpected = 0\nlower = 0\nupper = 0.5\n").unwrap();
    assert_eq!(secfuse(&["analyze", s(&out), "--golden", s(&golden)]).status.code(), Some(1));
}
