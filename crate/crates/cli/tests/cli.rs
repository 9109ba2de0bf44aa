use std::path::Path;
use std::process::{Command, Output};

fn jointinv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jointinv"))
        .args(args)
        .env("JOINTINV_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("cfg.toml");
    std::fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

const QUICK: &str = r#"
experiment = "exp1"
relation = "polynomial"
m = 16
n = 250
refinement = 1

[poly]
degree = 2
"#;

#[test]
fn missing_config_is_a_config_error() {
    let out = jointinv(&["pipeline"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--config"));
}

#[test]
fn unreadable_config_is_an_io_error() {
    let out = jointinv(&["pipeline", "--config", "/nonexistent/cfg.toml"]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn unknown_key_is_reported_with_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{QUICK}bogus = 1\n"));
    let out = jointinv(&["generate", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bogus") && err.contains("line"), "{err}");
}

#[test]
fn illegal_combination_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "experiment = \"exp3\"\nrelation = \"mlp\"\n");
    let out = jointinv(&["pipeline", "--config", &cfg, "--out", dir.path().join("run").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn phases_run_separately_and_match_the_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), QUICK);
    let split = dir.path().join("split");
    let whole = dir.path().join("whole");
    for phase in ["generate", "train", "invert", "evaluate"] {
        let out = jointinv(&[phase, "--config", &cfg, "--out", split.to_str().unwrap()]);
        assert!(out.status.success(), "{phase}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let out = jointinv(&["pipeline", "--config", &cfg, "--out", whole.to_str().unwrap(), "--seed", "0"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("gamma error"));
    for name in ["table.csv", "errors.csv", "dataset.csv", "config.toml", "manifest.json"] {
        assert!(split.join(name).exists(), "{name}");
        assert!(whole.join(name).exists(), "{name}");
    }
    let read = |p: &Path| std::fs::read_to_string(p).unwrap();
    assert_eq!(read(&split.join("table.csv")), read(&whole.join("table.csv")));
    assert_eq!(read(&split.join("errors.csv")), read(&whole.join("errors.csv")));
}

#[test]
fn train_before_generate_reports_missing_model_on_invert() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), QUICK);
    let out = jointinv(&["invert", "--config", &cfg, "--out", dir.path().join("empty").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train"));
}
