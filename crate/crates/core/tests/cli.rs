use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn fixture(rel: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(rel).display().to_string()
}

fn execbench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_execbench")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn validate_passes_on_fixtures() {
    let o = execbench(&["validate", "--env", "sql", "--dataset", &fixture("sql/tasks.jsonl"), "--backend", "local"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("17/17 tasks validated"));
}

#[test]
fn run_writes_trajectories_that_report_reads() {
    let dir = tempfile::tempdir().unwrap();
    let traj = dir.path().to_str().unwrap();
    let o = execbench(&[
        "run", "--env", "ctf", "--dataset", &fixture("ctf"), "--backend", "local", "--strategy", "react", "--policy",
        "oracle", "--traj-dir", traj, "--workers", "2",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("SR=100.0%"), "{}", stdout(&o));

    let o = execbench(&["report", traj, "--group-by", "category", "--json"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let all = v["rows"].as_array().unwrap().iter().find(|r| r["group"] == "all").unwrap();
    assert_eq!(all["episodes"], 5, "{v}");
    assert_eq!(all["success_rate"], 1.0);
}

#[test]
fn human_session_over_stdin() {
    let mut child = Command::new(env!("CARGO_BIN_EXE_execbench"))
        .args(["human", "--env", "sql", "--dataset", &fixture("sql/tasks.jsonl"), "--backend", "local"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(b"SELECT name FROM station WHERE founded = 1988\n:submit\n")
        .unwrap();
    let o = child.wait_with_output().unwrap();
    assert!(o.status.success());
    assert!(stdout(&o).contains("Reward: 1"), "{}", stdout(&o));
}

#[test]
fn bad_arguments_fail_cleanly() {
    let o = execbench(&["run", "--env", "cobol", "--dataset", "x"]);
    assert!(!o.status.success());
    let o = execbench(&["run", "--env", "sql", "--dataset", "/no/such/file.jsonl", "--backend", "local"]);
    assert!(!o.status.success());
    assert!(!String::from_utf8_lossy(&o.stderr).is_empty());
    let o = execbench(&["run", "--env", "sql", "--dataset", &fixture("sql/tasks.jsonl"), "--backend", "local", "--timeout", "0"]);
    assert!(!o.status.success());
}
