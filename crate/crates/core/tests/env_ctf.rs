use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use execbench::backend::local::LocalBackend;
use execbench::dataset::validate_gold;
use execbench::envs::ctf::{load_bundle, load_bundles, parse_action, stage_assets, AssetSpec, CtfConfig, CtfEnv};
use execbench::episode::{Action, EngineConfig, EnvError, EnvHandle, Environment, TaskInstance};
use execbench::scoring::RewardBreakdown;

const T: Duration = Duration::from_secs(10);

fn bundle_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/ctf")
}

fn fixtures() -> Vec<TaskInstance> {
    load_bundles(&bundle_root()).unwrap()
}

fn env() -> CtfEnv {
    CtfEnv::new(Arc::new(LocalBackend::default()), CtfConfig::default()).unwrap()
}

#[test]
fn gold_replay_scores_one() {
    let tasks = fixtures();
    assert!((4..=6).contains(&tasks.len()));
    let report = validate_gold(|| Ok(Box::new(env()) as Box<dyn Environment>), &tasks, &EngineConfig::default(), 4).unwrap();
    let failures: Vec<_> = report.failures().collect();
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn solutions_actually_recover_the_flag() {
    let mut e = env();
    for task in fixtures() {
        e.reset(&task).unwrap();
        let mut last = String::new();
        for cmd in task.extra_list("solution") {
            let r = e.execute(&cmd, T).unwrap();
            assert!(r.admissible, "{}: {cmd}: {}", task.id, r.text);
            last = r.text;
        }
        assert_eq!(last.trim(), task.gold, "{}", task.id);
    }
}

#[test]
fn flag_never_staged_in_plaintext() {
    let mut e = env();
    for task in fixtures() {
        e.reset(&task).unwrap();
        let r = e.execute(&format!("grep -rlF '{}' /ctf || true", task.gold), T).unwrap();
        // the blob task embeds the flag among noise by design
        if task.extra_str("category") != Some("forensics") {
            assert_eq!(r.text, "", "{}", task.id);
        }
    }
}

#[test]
fn staging_sets_modes_and_cleans_between_episodes() {
    let tasks = fixtures();
    let checker = tasks.iter().find(|t| t.id == "ctf-05").unwrap();
    let mut e = env();
    e.reset(checker).unwrap();
    assert_eq!(e.execute("stat -c %a /ctf/checker", T).unwrap().text, "755\n");
    assert_eq!(e.execute("pwd", T).unwrap().text, "/ctf\n");
    e.execute("touch /ctf/leftover", T).unwrap();
    e.reset(&tasks[0]).unwrap();
    assert_eq!(e.execute("ls /ctf", T).unwrap().text, "message.txt\n");
}

#[test]
fn zero_assets_is_a_no_op_and_collisions_fail() {
    let mut e = env();
    let empty = TaskInstance::new("t", "q", "ctf{x}");
    e.reset(&empty).unwrap();
    assert_eq!(e.execute("ls -A /ctf | wc -l", T).unwrap().text.trim(), "0");

    let src = bundle_root().join("tasks/ctf-01/assets/message.txt").to_string_lossy().into_owned();
    let dup = vec![
        AssetSpec { src: src.clone(), dest: "/ctf/a".into(), mode: "0644".into() },
        AssetSpec { src, dest: "/ctf/a".into(), mode: "0600".into() },
    ];
    assert!(matches!(stage_assets(e.container(), &dup, "/ctf"), Err(EnvError::Preprocess(_))));
    let missing = vec![AssetSpec { src: "/nonexistent/x".into(), dest: "/ctf/x".into(), mode: "0644".into() }];
    assert!(matches!(stage_assets(e.container(), &missing, "/ctf"), Err(EnvError::Preprocess(_))));
}

#[test]
fn flag_matching() {
    let task = &fixtures()[0];
    let mut e = env();
    e.reset(task).unwrap();
    let score = |e: &mut CtfEnv, s: Option<&str>| match e.submit(task, s, T).unwrap().breakdown {
        RewardBreakdown::Ctf { matched } => matched,
        other => panic!("{other:?}"),
    };
    assert!(score(&mut e, Some(&task.gold)));
    assert!(score(&mut e, Some(&format!("{}\n", task.gold))));
    let mut wrong = task.gold.clone();
    wrong.replace_range(4..5, "X");
    assert!(!score(&mut e, Some(&wrong)));
    assert!(!score(&mut e, None));
}

#[test]
fn episode_through_text_actions() {
    let tasks = fixtures();
    let mut h = EnvHandle::new(Box::new(env()), tasks.clone(), EngineConfig::default()).unwrap();
    h.reset(Some(0)).unwrap();
    let out = h.step(parse_action("cmd base64 -d /ctf/message.txt | base64 -d")).unwrap();
    assert_eq!(out.observation.text, tasks[0].gold);
    let out = h.step(parse_action(&format!("submit {}\n", tasks[0].gold))).unwrap();
    assert_eq!(out.reward, Some(1.0));
    h.reset(Some(0)).unwrap();
    let out = h.step(Action::Submit(Some("ctf{nope}".into()))).unwrap();
    assert_eq!(out.reward, Some(0.0));
}

#[test]
fn bundle_validation() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("task.json"),
        r#"{"id": "x", "instruction": "q", "flag": "ctf{y}", "assets": [{"src": "assets/none", "dest": "/ctf/none"}]}"#,
    )
    .unwrap();
    assert!(load_bundle(dir.path()).is_err());
    let bad_flag = vec![TaskInstance::new("t", "q", "not a flag")];
    assert!(EnvHandle::new(Box::new(env()), bad_flag, EngineConfig::default()).is_err());
}
