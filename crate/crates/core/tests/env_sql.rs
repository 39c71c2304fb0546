use std::path::Path;
use std::time::Duration;

use execbench::dataset::{self, validate_gold};
use execbench::envs::sql::{SqlConfig, SqlEngine, SqlEngineConfig, SqlEnv, SqliteEngine};
use execbench::episode::{Action, EngineConfig, EnvHandle, Environment, ErrorClass, TaskInstance};
use execbench::scoring::{Cell, RewardBreakdown};

const T: Duration = Duration::from_secs(10);

fn fixtures() -> Vec<TaskInstance> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/sql/tasks.jsonl");
    dataset::load(&path).unwrap().1
}

fn env() -> SqlEnv {
    SqlEnv::new(SqlConfig::default(), None).unwrap()
}

fn radio_task(gold: &str) -> TaskInstance {
    TaskInstance::new("t", "q", gold).with_extra("db", "radio")
}

#[test]
fn gold_replay_scores_one() {
    let tasks = fixtures();
    assert!(tasks.len() >= 15);
    let report = validate_gold(|| Ok(Box::new(env()) as Box<dyn Environment>), &tasks, &EngineConfig::default(), 4).unwrap();
    let failures: Vec<_> = report.failures().collect();
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn dump_directory_matches_builtin() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/sql");
    let mut from_dir = SqliteEngine::from_dir(&dir).unwrap();
    let mut builtin = SqliteEngine::builtin().unwrap();
    assert_eq!(from_dir.databases().unwrap(), vec!["radio", "school"]);
    for e in [&mut from_dir, &mut builtin] {
        e.use_database("school").unwrap();
    }
    let q = "SELECT * FROM enrollment ORDER BY student_id, course_id";
    assert_eq!(from_dir.run(q, T).unwrap(), builtin.run(q, T).unwrap());
}

#[test]
fn basic_statements() {
    let mut e = env();
    e.reset(&radio_task("SELECT 1")).unwrap();
    assert_eq!(e.run_sql("SELECT 1", T).unwrap().rows, vec![vec![Cell::Int(1)]]);
    let err = e.run_sql("SELEC 1", T).unwrap();
    assert!(!err.is_tabular());
    assert!(err.error.unwrap().contains("syntax error"));
    assert_eq!(e.run_sql("SHOW TABLES", T).unwrap().render(), "[('host',), ('program',), ('station',)]");
    assert_eq!(e.run_sql("show databases;", T).unwrap().render(), "[('radio',), ('school',)]");
    let desc = e.run_sql("DESC station", T).unwrap();
    assert_eq!(desc.rows.len(), 4);
    assert_eq!(desc.render().split("), (").next().unwrap(), "[('id', 'integer', 'NO', 'PRI', None, ''");
    assert!(e.run_sql("DESCRIBE nosuch", T).unwrap().error.unwrap().contains("doesn't exist"));
    // table names resolve case-insensitively
    assert_eq!(e.run_sql("SELECT COUNT(*) FROM STATION", T).unwrap().rows, vec![vec![Cell::Int(5)]]);
    assert!(e.run_sql("USE school", T).unwrap().is_tabular());
    assert_eq!(e.run_sql("SHOW TABLES", T).unwrap().rows.len(), 3);
    assert!(!e.run_sql("USE nosuch", T).unwrap().is_tabular());
}

#[test]
fn canonical_cells() {
    let mut e = env();
    e.reset(&radio_task("SELECT 1").with_extra("db", "school")).unwrap();
    let r = e.run_sql("SELECT score FROM enrollment WHERE student_id = 2 ORDER BY course_id", T).unwrap();
    assert_eq!(r.rows, vec![vec![Cell::decimal("72.25")], vec![Cell::decimal("88")]]);
    let r = e.run_sql("SELECT name, 29 FROM student WHERE id = 1", T).unwrap();
    assert_eq!(r.render(), "[('Ada', 29)]");
    e.reset(&radio_task("SELECT 1")).unwrap();
    let r = e.run_sql("SELECT name FROM host WHERE id = 3", T).unwrap();
    assert_eq!(r.rows, vec![vec![Cell::text("Zoe\u{308}")]]);
}

#[test]
fn episode_scoring() {
    let tasks = vec![radio_task("SELECT name FROM station WHERE founded = 1988")];
    let mut h = EnvHandle::new(Box::new(env()), tasks, EngineConfig::default()).unwrap();
    h.reset(None).unwrap();
    let out = h.step(Action::code("SHOW TABLES")).unwrap();
    assert_eq!(out.observation.text, "[('host',), ('program',), ('station',)]");
    let out = h.step(Action::code("SELECT name FROM station WHERE id = 1")).unwrap();
    assert_eq!(out.observation.text, "[('Sky Radio',)]");
    assert_eq!(out.reward, None);
    assert_eq!(h.interim_reward().unwrap(), Some(1.0));
    let out = h.step(Action::submit()).unwrap();
    assert_eq!(out.reward, Some(1.0));
    assert!(out.done);
}

#[test]
fn wrong_order_and_errors_score_zero() {
    let gold = "SELECT name FROM station WHERE city = 'Bergen' ORDER BY founded";
    let mut e = env();
    let task = radio_task(gold);
    e.reset(&task).unwrap();
    e.execute("SELECT name FROM station WHERE city = 'Bergen' ORDER BY founded DESC", T).unwrap();
    let Some(RewardBreakdown::Sql(b)) = e.interim_reward(&task, T).unwrap() else { panic!() };
    assert_eq!((b.iou, b.order_coeff, b.total), (1.0, 0.0, 0.0));

    let exec = e.execute("SELECT nme FROM station", T).unwrap();
    assert!(!exec.admissible);
    assert_eq!(exec.error_class, ErrorClass::ExecError);
    assert!(exec.text.starts_with("Error executing query: "));
    let sub = e.submit(&task, None, T).unwrap();
    assert_eq!(sub.breakdown.total(), Some(0.0));

    // a bare submit before any query scores zero
    e.reset(&task).unwrap();
    assert_eq!(e.submit(&task, None, T).unwrap().breakdown.total(), Some(0.0));
    // submit carrying the query runs it first
    let sub = e.submit(&task, Some(gold), T).unwrap();
    assert!(sub.execution.unwrap().admissible);
    assert_eq!(sub.breakdown.total(), Some(1.0));
}

#[test]
fn gold_runs_on_task_database_after_use() {
    let task = radio_task("SELECT COUNT(*) FROM program");
    let mut e = env();
    e.reset(&task).unwrap();
    e.execute("SELECT COUNT(*) FROM program", T).unwrap();
    e.execute("USE school", T).unwrap();
    e.execute("SELECT 8", T).unwrap();
    assert_eq!(e.submit(&task, None, T).unwrap().breakdown.total(), Some(1.0));
}

#[test]
fn writes_are_undone_between_episodes() {
    let task = radio_task("SELECT COUNT(*) FROM host");
    let mut e = env();
    e.reset(&task).unwrap();
    let exec = e.execute("DELETE FROM host", T).unwrap();
    assert!(exec.admissible);
    assert_eq!(e.run_sql("SELECT COUNT(*) FROM host", T).unwrap().rows, vec![vec![Cell::Int(0)]]);
    e.reset(&task).unwrap();
    assert_eq!(e.run_sql("SELECT COUNT(*) FROM host", T).unwrap().rows, vec![vec![Cell::Int(7)]]);
}

#[test]
fn runaway_query_times_out() {
    let mut e = env();
    e.reset(&radio_task("SELECT 1")).unwrap();
    let q = "WITH RECURSIVE c(x) AS (SELECT 1 UNION ALL SELECT x + 1 FROM c) SELECT COUNT(*) FROM c";
    let exec = e.execute(q, Duration::from_millis(300)).unwrap();
    assert_eq!(exec.error_class, ErrorClass::Timeout);
    assert!(!exec.admissible);
    assert!(e.execute("SELECT 1", T).unwrap().admissible);
}

#[test]
fn mutating_gold_is_rejected_without_reset_script() {
    let bad = vec![radio_task("DELETE FROM host")];
    assert!(EnvHandle::new(Box::new(env()), bad.clone(), EngineConfig::default()).is_err());
    let config = SqlConfig {
        engine: SqlEngineConfig::Sqlite { dumps: None },
        reset_script: Some("SELECT 1;".into()),
    };
    assert!(EnvHandle::new(Box::new(SqlEnv::new(config, None).unwrap()), bad, EngineConfig::default()).is_ok());
    let unknown = vec![TaskInstance::new("t", "q", "SELECT 1").with_extra("db", "nope")];
    assert!(EnvHandle::new(Box::new(env()), unknown, EngineConfig::default()).is_err());
}
