use std::path::Path;
use std::process::{Command, Output};

fn fedade(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedade")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("config.json");
    std::fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

const SMALL: &str = r#"{
  "num_clients": 6,
  "participant_rate": 0.5,
  "pretrain_samples": 1000,
  "pretrain_epochs": 2,
  "scenario": { "T": 5 },
  "modes": ["adaptive", { "fixed": 1e-5 }],
  "seeds": [0, 1],
  "checkpoint_interval": 2,
  "emit_oracle_diagnostics": true
}"#;

#[test]
fn empty_config_validates_with_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let out = fedade(&["validate", "--config", &write_config(dir.path(), "{}")]);
    assert!(out.status.success());
    let echoed: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(echoed["num_clients"], 100);
    assert_eq!(echoed["seeds"], serde_json::json!([0]));

    let again = write_config(dir.path(), &String::from_utf8(out.stdout).unwrap());
    let out2 = fedade(&["validate", "--config", &again]);
    assert!(out2.status.success(), "{}", String::from_utf8_lossy(&out2.stderr));
    assert_eq!(serde_json::from_slice::<serde_json::Value>(&out2.stdout).unwrap(), echoed);
}

#[test]
fn invalid_configs_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    for body in [
        r#"{ "seeds": [] }"#,
        r#"{ "bounds": { "eta_min": 1e-3, "eta_max": 1e-5 } }"#,
        r#"{ "num_clients": 0, "bogus": 1 }"#,
        "{ \"num_clients\": 5,\n  oops }",
    ] {
        let out = fedade(&["validate", "--config", &write_config(dir.path(), body)]);
        assert_eq!(out.status.code(), Some(2), "{body}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn missing_config_is_an_io_error() {
    let out = fedade(&["validate", "--config", "/nonexistent/config.json"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn run_writes_outputs_and_report_rebuilds_the_table() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("results");
    let config = write_config(dir.path(), SMALL);
    let out = fedade(&["run", "--config", &config, "--workers", "2", "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let names: Vec<String> = std::fs::read_dir(&out_dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    let count = |prefix: &str| names.iter().filter(|n| n.starts_with(prefix)).count();
    assert_eq!(count("metrics_"), 4);
    assert_eq!(count("summary_"), 2);
    assert_eq!(count("comparison_"), 1);
    assert_eq!(count("diagnostics_"), 4);
    assert_eq!(count("checkpoint_"), 4 * 2);

    let metrics = names.iter().find(|n| n.starts_with("metrics_")).unwrap();
    let csv = std::fs::read_to_string(out_dir.join(metrics)).unwrap();
    assert_eq!(csv.lines().count(), 1 + 5 * 6);

    let out = fedade(&["report", "--in", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = std::fs::read_to_string(out_dir.join("comparison.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(table.contains("adaptive"));
    assert!(table.contains("fixed:1e-5"));

    let hashed = names.iter().find(|n| n.starts_with("comparison_")).unwrap();
    let original = std::fs::read_to_string(out_dir.join(hashed)).unwrap();
    assert_eq!(original, table);
}

#[test]
fn report_on_an_empty_directory_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = fedade(&["report", "--in", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
}
