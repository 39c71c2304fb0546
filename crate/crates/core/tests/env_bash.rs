use std::path::Path;
use std::sync::Arc;

use execbench::backend::local::LocalBackend;
use execbench::dataset::{self, validate_gold};
use execbench::envs::bash::{BashConfig, BashEnv};
use execbench::episode::{Action, EngineConfig, EnvHandle, Environment, TaskInstance, TerminatedBy};
use execbench::scoring::{ChangeKind, FsChange, RewardBreakdown};

fn fixtures() -> Vec<TaskInstance> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/bash/tasks.json");
    dataset::load(&path).unwrap().1
}

fn env() -> BashEnv {
    BashEnv::new(Arc::new(LocalBackend::default()), BashConfig::default()).unwrap()
}

fn handle(tasks: Vec<TaskInstance>) -> EnvHandle {
    EnvHandle::new(Box::new(env()), tasks, EngineConfig::default()).unwrap()
}

#[test]
fn gold_replay_scores_one() {
    let tasks = fixtures();
    assert!(tasks.len() >= 24);
    let report = validate_gold(|| Ok(Box::new(env()) as Box<dyn Environment>), &tasks, &EngineConfig::default(), 4).unwrap();
    let failures: Vec<_> = report.failures().collect();
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn echo_and_gibberish() {
    let mut h = handle(fixtures());
    h.reset(Some(0)).unwrap();
    let out = h.step(Action::code("echo hi")).unwrap();
    assert_eq!(out.observation.text, "hi\n");
    assert!(!out.done);
    assert_eq!(out.reward, None);
    assert!(out.info.admissible);
    let out = h.step(Action::code("qwzx --frobnicate")).unwrap();
    assert!(!out.info.admissible);
    let out = h.step(Action::code("pwd")).unwrap();
    assert_eq!(out.observation.text, "/testbed\n");
}

#[test]
fn change_detection() {
    let mut e = env();
    let task = TaskInstance::new("t", "q", "true").with_extra("fs", "1");
    e.reset(&task).unwrap();
    assert!(e.agent_changes().unwrap().is_empty());
    e.execute("echo more >> /testbed/recent.txt", std::time::Duration::from_secs(5)).unwrap();
    e.execute("touch /testbed/new.txt && rm /testbed/hello.c", std::time::Duration::from_secs(5)).unwrap();
    // same bytes, fresh inode: not a change
    e.execute("cp /testbed/hello.php /tmp/h && rm /testbed/hello.php && cp /tmp/h /testbed/hello.php", std::time::Duration::from_secs(5)).unwrap();
    e.execute("chmod 600 /testbed/Hello.java", std::time::Duration::from_secs(5)).unwrap();
    assert_eq!(
        e.agent_changes().unwrap(),
        vec![
            FsChange::new("/testbed/hello.c", ChangeKind::Deleted),
            FsChange::new("/testbed/new.txt", ChangeKind::Added),
            FsChange::new("/testbed/recent.txt", ChangeKind::Changed),
        ]
    );
    e.reset(&task).unwrap();
    assert!(e.agent_changes().unwrap().is_empty());
    let mode = e.agent().exec("stat -c %a /testbed/Hello.java", std::time::Duration::from_secs(5)).unwrap();
    assert_eq!(mode.stdout_text(), "644\n");
}

#[test]
fn extra_change_costs_the_penalty() {
    let tasks = vec![TaskInstance::new("t", "Print hello.", "echo hello").with_extra("fs", "2")];
    let mut h = handle(tasks);
    h.reset(None).unwrap();
    h.step(Action::code("echo hello; touch /system/extra")).unwrap();
    let out = h.step(Action::submit()).unwrap();
    let Some(RewardBreakdown::Bash(b)) = out.info.reward_breakdown else { panic!() };
    assert_eq!(b.similarity, 1.0);
    assert_eq!(b.path_correct_ratio, 1.0);
    assert!((b.total - 0.721_908_7).abs() < 1e-6, "{}", b.total);
}

#[test]
fn wrong_content_on_shared_path() {
    let tasks = vec![TaskInstance::new("t", "Write x.", "echo x > /workspace/out.txt").with_extra("fs", "3")];
    let mut h = handle(tasks);
    h.reset(None).unwrap();
    h.step(Action::code("echo y > /workspace/out.txt")).unwrap();
    let out = h.step(Action::submit()).unwrap();
    let Some(RewardBreakdown::Bash(b)) = out.info.reward_breakdown else { panic!() };
    assert_eq!(b.path_correct_ratio, 0.0);
    assert_eq!(b.fs_miss_penalty_term, 1.0);
}

#[test]
fn state_does_not_leak_between_episodes() {
    let mut h = handle(fixtures());
    h.reset(Some(0)).unwrap();
    h.step(Action::code("cd /testbed/dir1; export LEAK=1; rm -rf /testbed/dir2")).unwrap();
    h.reset(Some(0)).unwrap();
    assert_eq!(h.step(Action::code("pwd; echo \"[$LEAK]\"; ls -d dir2")).unwrap().observation.text, "/testbed\n[]\ndir2\n");
    assert_eq!(h.last_trajectory(), None);
}

#[test]
fn timeout_keeps_working_directory() {
    let tasks = vec![TaskInstance::new("t", "q", "true").with_extra("fs", "3")];
    let config = EngineConfig {
        timeout: std::time::Duration::from_secs(1),
        ..EngineConfig::default()
    };
    let mut h = EnvHandle::new(Box::new(env()), tasks, config).unwrap();
    h.reset(None).unwrap();
    let out = h.step(Action::code("sleep 30")).unwrap();
    assert!(!out.info.admissible);
    assert_eq!(out.observation.error_class, execbench::episode::ErrorClass::Timeout);
    assert_eq!(h.step(Action::code("pwd")).unwrap().observation.text, "/workspace\n");
    let t = h.finish(TerminatedBy::MaxTurns).unwrap();
    assert_eq!(t.turns.len(), 2);
}

#[test]
fn doing_nothing_never_scores_one() {
    let tasks = fixtures();
    let mut h = handle(tasks.clone());
    for i in 0..tasks.len() {
        h.reset(Some(i)).unwrap();
        let out = h.step(Action::submit()).unwrap();
        assert!(out.reward.unwrap() < 1.0, "task {} is solved by doing nothing", tasks[i].id);
    }
}
