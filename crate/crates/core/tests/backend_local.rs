use std::time::Duration;

use execbench::backend::local::LocalBackend;
use execbench::backend::{snapshot_reset, Backend, BackendError, ContainerSpec, EntryMode};

const T: Duration = Duration::from_secs(10);

fn provision() -> Box<dyn execbench::backend::Container> {
    let mut spec = ContainerSpec::new("local", "/testbed");
    spec.paths = vec!["/testbed".into()];
    LocalBackend::default().provision(&spec).unwrap()
}

#[test]
fn exec_basics() {
    let c = provision();
    let r = c.exec("echo 42", T).unwrap();
    assert_eq!(r.stdout, b"42\n");
    assert_eq!(r.exit_status, 0);
    let r = c.exec("pwd", T).unwrap();
    assert_eq!(r.stdout_text(), "/testbed\n");
    let r = c.exec("echo err >&2; false", T).unwrap();
    assert_eq!(r.stderr_text(), "err\n");
    assert_eq!(r.exit_status, 1);
    let r = c.exec("printf 'no newline'", T).unwrap();
    assert_eq!(r.stdout_text(), "no newline");
}

#[test]
fn session_is_stateful() {
    let c = provision();
    c.exec("cd /tmp && X=5", T).unwrap();
    assert_eq!(c.exec("pwd", T).unwrap().stdout_text(), "/tmp\n");
    assert_eq!(c.exec("echo $X", T).unwrap().stdout_text(), "5\n");
}

#[test]
fn exit_status_passthrough_and_restart() {
    let c = provision();
    let r = c.exec("exit 7", T).unwrap();
    assert_eq!(r.exit_status, 7);
    assert!(!r.timed_out);
    assert_eq!(c.exec("echo back", T).unwrap().stdout_text(), "back\n");
}

#[test]
fn timeout_kills_and_recovers() {
    let c = provision();
    let r = c.exec("echo started; sleep 999", Duration::from_secs(1)).unwrap();
    assert!(r.timed_out);
    assert_eq!(r.exit_status, -1);
    assert!(r.duration < Duration::from_secs(5));
    assert_eq!(c.exec("echo alive", T).unwrap().stdout_text(), "alive\n");
    let r = c.exec_oneshot("sleep 999", Duration::from_millis(500)).unwrap();
    assert!(r.timed_out);
}

#[test]
fn heredoc_and_quotes_survive() {
    let c = provision();
    let cmd = "cat <<'EOF'\nline 'one'\n\"two\" $HOME\nEOF";
    assert_eq!(c.exec(cmd, T).unwrap().stdout_text(), "line 'one'\n\"two\" $HOME\n");
}

#[test]
fn hashes() {
    let c = provision();
    c.exec("touch /testbed/empty && printf abc > /testbed/abc && mkdir -p /testbed/d", T).unwrap();
    assert_eq!(c.hash_file("/testbed/empty").unwrap().as_deref(), Some("d41d8cd98f00b204e9800998ecf8427e"));
    assert_eq!(c.hash_file("/testbed/abc").unwrap().as_deref(), Some("900150983cd24fb0d6963f7d28e17f72"));
    assert_eq!(c.hash_file("/testbed/missing").unwrap(), None);
    assert!(matches!(c.hash_file("/testbed/d"), Err(BackendError::IsDirectory(_))));
}

#[test]
fn files_round_trip() {
    let c = provision();
    c.write_file("/testbed/sub/run.sh", b"#!/bin/sh\necho ran\n", 0o755).unwrap();
    assert_eq!(c.exec("/testbed/sub/run.sh", T).unwrap().stdout_text(), "ran\n");
    assert_eq!(c.read_file("/testbed/sub/run.sh").unwrap().unwrap(), b"#!/bin/sh\necho ran\n");
    assert_eq!(c.read_file("/testbed/nope").unwrap(), None);
}

#[test]
fn failing_init_script_names_the_command() {
    let mut spec = ContainerSpec::new("local", "/w");
    spec.init_script = vec!["true".into(), "echo bad >&2; exit 3".into()];
    match LocalBackend::default().provision(&spec) {
        Err(BackendError::InitFailed { command, status, stderr }) => {
            assert_eq!(command, "echo bad >&2; exit 3");
            assert_eq!(status, 3);
            assert_eq!(stderr, "bad\n");
        }
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("provisioning should fail"),
    }
}

#[test]
fn remove_is_idempotent_and_listed() {
    let backend = LocalBackend::default();
    let c = backend.provision(&ContainerSpec::new("local", "/w")).unwrap();
    assert!(backend.list().unwrap().contains(&c.id().to_string()));
    c.remove().unwrap();
    c.remove().unwrap();
    assert!(!backend.list().unwrap().contains(&c.id().to_string()));
    assert!(matches!(c.exec("true", T), Err(BackendError::Dead(_))));
}

#[test]
fn service_mode_is_stateless() {
    let mut spec = ContainerSpec::new("local", "/w");
    spec.entry_mode = EntryMode::Service;
    let c = LocalBackend::default().provision(&spec).unwrap();
    c.exec("cd /tmp", T).unwrap();
    assert_eq!(c.exec("pwd", T).unwrap().stdout_text(), "/w\n");
}

#[test]
fn snapshot_reset_restores_tree() {
    let c = provision();
    let git = "git --git-dir=/testbed/.git --work-tree=/testbed";
    c.exec_oneshot(
        &format!("printf x > /testbed/f && {git} init -q && {git} add -A && {git} -c user.name=a -c user.email=a@b commit -qm init"),
        T,
    )
    .unwrap();
    let before = c.hash_file("/testbed/f").unwrap();
    c.exec("printf y >> /testbed/f; touch /testbed/new", T).unwrap();
    let reset = vec![format!("{git} reset -q --hard"), format!("{git} clean -fdq")];
    snapshot_reset(c.as_ref(), &reset).unwrap();
    assert_eq!(c.hash_file("/testbed/f").unwrap(), before);
    assert_eq!(c.hash_file("/testbed/new").unwrap(), None);
    snapshot_reset(c.as_ref(), &reset).unwrap();
    let status = c.exec_oneshot(&format!("{git} status --porcelain"), T).unwrap();
    assert_eq!(status.stdout_text(), "");
}
