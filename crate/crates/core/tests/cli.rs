use std::fs;
use std::process::{Command, Output};

fn iftflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iftflow"))
        .args(args)
        .env_remove("IFTFLOW_OUT")
        .output()
        .unwrap()
}

const SMALL: [&str; 4] = ["--repeats", "2", "--iterations", "40"];

#[test]
fn run_writes_all_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ift");
    let mut args = vec!["run", "--experiment", "mixture2d", "--method", "ift", "--out", out.to_str().unwrap()];
    args.extend(SMALL);
    let result = iftflow(&args);
    assert!(result.status.success(), "{}", String::from_utf8_lossy(&result.stderr));
    for file in ["losses.csv", "trajectory.jsonl", "config.json"] {
        assert!(out.join(file).is_file(), "missing {file}");
    }
    let config: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(config["method"], "ift");
    assert_eq!(config["repeats"], 2);
    assert_eq!(config["flow"]["iterations"], 40);
    // header + steps 0..=80
    assert_eq!(fs::read_to_string(out.join("losses.csv")).unwrap().lines().count(), 82);
}

#[test]
fn seed_override_changes_noisy_runs() {
    let dir = tempfile::tempdir().unwrap();
    let run = |sub: &str, seed: &str| {
        let out = dir.path().join(sub);
        let mut args = vec!["run", "--experiment", "gaussian2d", "--method", "mmd_flow_noisy", "--seed", seed];
        args.extend(SMALL);
        args.extend(["--out", out.to_str().unwrap()]);
        assert!(iftflow(&args).status.success());
        fs::read(out.join("losses.csv")).unwrap()
    };
    assert_eq!(run("a", "3"), run("b", "3"));
    assert_ne!(run("a", "3"), run("c", "4"));
}

#[test]
fn compare_writes_one_directory_per_method() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["compare", "--experiment", "gaussian2d", "--methods", "ift,wfr", "--out", dir.path().to_str().unwrap()];
    args.extend(SMALL);
    let result = iftflow(&args);
    assert!(result.status.success(), "{}", String::from_utf8_lossy(&result.stderr));
    assert!(dir.path().join("ift/losses.csv").is_file());
    assert!(dir.path().join("wfr/losses.csv").is_file());
    assert!(!dir.path().join("mmd_flow").exists());
}

#[test]
fn output_directory_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["run", "--experiment", "gaussian2d", "--method", "mmd_flow"];
    args.extend(SMALL);
    let result = Command::new(env!("CARGO_BIN_EXE_iftflow"))
        .args(&args)
        .env("IFTFLOW_OUT", dir.path())
        .output()
        .unwrap();
    assert!(result.status.success(), "{}", String::from_utf8_lossy(&result.stderr));
    assert!(dir.path().join("losses.csv").is_file());
}

#[test]
fn oracle_check_passes() {
    let result = iftflow(&["oracle-check"]);
    assert!(result.status.success());
    let stdout = String::from_utf8(result.stdout).unwrap();
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines.iter().all(|l| l.starts_with("PASS ")), "{stdout}");
}

#[test]
fn failures_print_a_json_error_line() {
    let dir = tempfile::tempdir().unwrap();
    let result = iftflow(&["run", "--experiment", "nonexistent", "--out", dir.path().to_str().unwrap()]);
    assert!(!result.status.success());
    let stderr = String::from_utf8(result.stderr).unwrap();
    let line = stderr.lines().last().unwrap();
    let v: serde_json::Value = serde_json::from_str(line).unwrap();
    assert_eq!(v["error"]["kind"], "unknown_experiment");
    assert!(v["error"]["message"].as_str().unwrap().contains("nonexistent"));

    let result = iftflow(&["run", "--experiment", "gaussian2d", "--repeats", "0", "--out", dir.path().to_str().unwrap()]);
    assert!(!result.status.success());
    let stderr = String::from_utf8(result.stderr).unwrap();
    let v: serde_json::Value = serde_json::from_str(stderr.lines().last().unwrap()).unwrap();
    assert_eq!(v["error"]["kind"], "invalid_input");

    let result = iftflow(&["run", "--experiment", "gaussian2d", "--method", "sgd", "--out", dir.path().to_str().unwrap()]);
    assert!(!result.status.success());
}
