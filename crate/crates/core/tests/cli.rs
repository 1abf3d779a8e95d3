use std::path::Path;
use std::process::{Command, Output};

fn pmi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pmi")).args(args).output().expect("spawn pmi")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

#[test]
fn validate_defaults_succeeds() {
    let o = pmi(&["validate"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn inadmissible_parameters_exit_one() {
    let o = pmi(&["validate", "--set", "sigma1=-1"]);
    assert_eq!(code(&o), 1);
    let o = pmi(&["simulate", "--set", "nu=1.5"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&pmi(&["experiment", "nonsense"])), 1);
    assert_eq!(code(&pmi(&["simulate", "--horizon", "ten"])), 1);
    assert_eq!(code(&pmi(&["validate", "--set", "no_equals_sign"])), 1);
    assert_eq!(code(&pmi(&["validate", "--set", "not_a_param=1"])), 1);
    assert_eq!(code(&pmi(&["experiment", "concentration", "--set", "unknown_key=3"])), 1);
}

#[test]
fn unreadable_history_is_a_config_error() {
    let o = pmi(&["infer", "--history", "/definitely/not/here.csv"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn simulate_then_infer() {
    let dir = tempfile::tempdir().unwrap();
    let hist = dir.path().join("h.csv");
    let h = hist.to_str().unwrap();
    let o = pmi(&["simulate", "--horizon", "30", "--seed", "4", "--out", h]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&hist).unwrap();
    assert!(text.starts_with("t,p,v"));
    assert_eq!(text.lines().count(), 32);

    let o = pmi(&["infer", "--history", h, "--particles", "100", "--seed", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.contains("posterior_p1"));
    let again = pmi(&["infer", "--history", h, "--particles", "100", "--seed", "2"]);
    assert_eq!(out, String::from_utf8(again.stdout).unwrap());
}

#[test]
fn malformed_history_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let hist = dir.path().join("bad.csv");
    std::fs::write(&hist, "t,p,v\n0,0.5,0\n1,0.5,-1\n").unwrap();
    let o = pmi(&["infer", "--history", hist.to_str().unwrap(), "--particles", "50"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn unwritable_output_is_a_runtime_failure() {
    let o = pmi(&["simulate", "--horizon", "5", "--out", "/nonexistent-dir/h.csv"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn experiment_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("exp");
    let o = pmi(&[
        "experiment",
        "identifiability",
        "--replications",
        "3",
        "--particles",
        "60",
        "--set",
        "omega1_grid=0.5",
        "--set",
        "horizon=15",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["identifiability_records.csv", "identifiability_summary.csv", "identifiability.svg", "identifiability_meta.txt"] {
        assert!(Path::new(&out).join(f).exists(), "missing {f}");
    }
}
