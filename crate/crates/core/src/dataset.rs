//! Dataset ingestion and gold validation.
//!
//! A dataset is a JSON array of records or one record per line. Each record
//! needs `query` and `gold`; `id` defaults to the record's ordinal. Keys other
//! than `id`, `query`, `gold` and `extras` are folded into `extras`.

use std::collections::{BTreeSet, HashSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::episode::{Action, EngineConfig, EnvError, EnvHandle, Environment, TaskInstance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetFormat {
    JsonArray,
    JsonLines,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub path: PathBuf,
    pub format: DatasetFormat,
    pub count: usize,
    pub extras_keys: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordIssue {
    pub index: usize,
    pub message: String,
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unrecognized dataset format: {0}")]
    Format(String),
    #[error("invalid records: {}", format_issues(.0))]
    Validation(Vec<RecordIssue>),
}

fn format_issues(issues: &[RecordIssue]) -> String {
    issues
        .iter()
        .map(|i| format!("record {}: {}", i.index, i.message))
        .collect::<Vec<_>>()
        .join("; ")
}

pub fn load(path: &Path) -> Result<(DatasetManifest, Vec<TaskInstance>), DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let (format, tasks) = parse(&text)?;
    let extras_keys = tasks.iter().flat_map(|t| t.extras.keys().cloned()).collect();
    Ok((
        DatasetManifest {
            path: path.to_path_buf(),
            format,
            count: tasks.len(),
            extras_keys,
        },
        tasks,
    ))
}

/// Parse dataset text, detecting the format from its first character.
pub fn parse(text: &str) -> Result<(DatasetFormat, Vec<TaskInstance>), DatasetError> {
    let trimmed = text.trim_start_matches('\u{feff}').trim_start();
    let (format, records): (_, Vec<Result<Value, String>>) = match trimmed.chars().next() {
        Some('[') => {
            let v: Vec<Value> = serde_json::from_str(trimmed).map_err(|e| DatasetError::Format(format!("JSON array: {e}")))?;
            (DatasetFormat::JsonArray, v.into_iter().map(Ok).collect())
        }
        Some('{') => (
            DatasetFormat::JsonLines,
            trimmed
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| serde_json::from_str(l).map_err(|e| e.to_string()))
                .collect(),
        ),
        None => (DatasetFormat::JsonArray, Vec::new()),
        Some(c) => return Err(DatasetError::Format(format!("expected `[` or `{{`, found {c:?}"))),
    };

    let mut issues = Vec::new();
    let mut tasks = Vec::new();
    let mut seen = HashSet::new();
    for (index, record) in records.into_iter().enumerate() {
        match record.and_then(|v| to_task(index, v)) {
            Ok(task) => {
                if !seen.insert(task.id.clone()) {
                    issues.push(RecordIssue {
                        index,
                        message: format!("duplicate id {:?}", task.id),
                    });
                }
                tasks.push(task);
            }
            Err(message) => issues.push(RecordIssue { index, message }),
        }
    }
    if issues.is_empty() {
        Ok((format, tasks))
    } else {
        Err(DatasetError::Validation(issues))
    }
}

fn to_task(index: usize, value: Value) -> Result<TaskInstance, String> {
    let Value::Object(mut obj) = value else {
        return Err("record is not a JSON object".into());
    };
    let id = match obj.remove("id") {
        None | Some(Value::Null) => index.to_string(),
        Some(Value::String(s)) if !s.is_empty() => s,
        Some(Value::Number(n)) => n.to_string(),
        Some(other) => return Err(format!("id must be a non-empty string or number, got {other}")),
    };
    let query = match obj.remove("query") {
        Some(Value::String(s)) if !s.trim().is_empty() => s,
        Some(_) => return Err("query must be a non-empty string".into()),
        None => return Err("missing query".into()),
    };
    let gold = match obj.remove("gold") {
        Some(Value::String(s)) if !s.trim().is_empty() => s,
        Some(Value::Array(steps)) if !steps.is_empty() && steps.iter().all(Value::is_string) => steps
            .iter()
            .map(|s| s.as_str().unwrap_or_default())
            .collect::<Vec<_>>()
            .join("\n"),
        Some(_) => return Err("gold must be a non-empty string".into()),
        None => return Err("missing gold".into()),
    };
    let mut extras = Map::new();
    let nested = obj.remove("extras");
    extras.extend(obj);
    match nested {
        None | Some(Value::Null) => {}
        Some(Value::Object(m)) => extras.extend(m),
        Some(_) => return Err("extras must be an object".into()),
    }
    Ok(TaskInstance { id, query, gold, extras })
}

pub fn write(path: &Path, tasks: &[TaskInstance], format: DatasetFormat) -> std::io::Result<()> {
    let text = to_string(tasks, format);
    std::fs::write(path, text)
}

pub fn to_string(tasks: &[TaskInstance], format: DatasetFormat) -> String {
    match format {
        DatasetFormat::JsonArray => {
            let mut s = serde_json::to_string_pretty(tasks).expect("tasks serialize");
            s.push('\n');
            s
        }
        DatasetFormat::JsonLines => tasks
            .iter()
            .map(|t| serde_json::to_string(t).expect("task serializes") + "\n")
            .collect(),
    }
}

/// Outcome of replaying one task's gold answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldCheck {
    pub index: usize,
    pub id: String,
    pub admissible: bool,
    pub reward: Option<f64>,
    /// Infrastructure or evaluation failure, as opposed to a low reward.
    pub error: Option<String>,
}

impl GoldCheck {
    pub fn passed(&self) -> bool {
        self.error.is_none() && self.admissible && self.reward == Some(1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldReport {
    pub checks: Vec<GoldCheck>,
}

impl GoldReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(GoldCheck::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GoldCheck> {
        self.checks.iter().filter(|c| !c.passed())
    }
}

/// Replay each task's gold plan as a dummy agent and submit. `workers`
/// environments run in parallel, each built by `factory`.
pub fn validate_gold<F>(factory: F, tasks: &[TaskInstance], config: &EngineConfig, workers: usize) -> Result<GoldReport, EnvError>
where
    F: Fn() -> Result<Box<dyn Environment>, EnvError> + Sync,
{
    if tasks.is_empty() {
        return Err(EnvError::Argument("dataset is empty".into()));
    }
    let next = AtomicUsize::new(0);
    let results = Mutex::new(Vec::with_capacity(tasks.len()));
    let workers = workers.clamp(1, tasks.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| {
                let mut handle: Option<EnvHandle> = None;
                loop {
                    let index = next.fetch_add(1, Ordering::SeqCst);
                    if index >= tasks.len() {
                        break;
                    }
                    if handle.is_none() {
                        match factory().and_then(|env| EnvHandle::new(env, tasks.to_vec(), config.clone())) {
                            Ok(h) => handle = Some(h),
                            Err(e) => {
                                results.lock().unwrap().push(GoldCheck {
                                    index,
                                    id: tasks[index].id.clone(),
                                    admissible: false,
                                    reward: None,
                                    error: Some(e.to_string()),
                                });
                                continue;
                            }
                        }
                    }
                    let h = handle.as_mut().expect("handle present");
                    let check = replay(h, index);
                    if check.error.is_some() {
                        // start the next task from a fresh environment
                        handle = None;
                    }
                    results.lock().unwrap().push(check);
                }
            });
        }
    });
    let mut checks = results.into_inner().unwrap();
    checks.sort_by_key(|c| c.index);
    Ok(GoldReport { checks })
}

fn replay(h: &mut EnvHandle, index: usize) -> GoldCheck {
    let id = h.tasks()[index].id.clone();
    let mut check = GoldCheck {
        index,
        id,
        admissible: true,
        reward: None,
        error: None,
    };
    let run = |h: &mut EnvHandle, check: &mut GoldCheck| -> Result<(), EnvError> {
        h.reset(Some(index))?;
        let plan = h.gold_plan().expect("episode active");
        for action in plan.actions {
            let out = h.step(Action::Code(action))?;
            check.admissible &= out.info.admissible;
        }
        let out = h.step(Action::Submit(plan.submit))?;
        check.admissible &= out.info.admissible;
        check.reward = out.reward;
        Ok(())
    };
    if let Err(e) = run(h, &mut check) {
        check.error = Some(e.to_string());
    }
    check
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn array_with_defaults() {
        let (fmt, tasks) = parse(r#"[{"query":"q0","gold":"g0"},{"id":7,"query":"q1","gold":"g1","hardness":"easy"}]"#).unwrap();
        assert_eq!(fmt, DatasetFormat::JsonArray);
        assert_eq!(tasks[0].id, "0");
        assert_eq!(tasks[1].id, "7");
        assert_eq!(tasks[1].extra_str("hardness"), Some("easy"));
    }

    #[test]
    fn lines_with_nested_extras() {
        let text = "{\"query\":\"q\",\"gold\":\"g\",\"extras\":{\"fs\":2}}\n\n{\"query\":\"r\",\"gold\":[\"a\",\"b\"]}\n";
        let (fmt, tasks) = parse(text).unwrap();
        assert_eq!(fmt, DatasetFormat::JsonLines);
        assert_eq!(tasks[0].extra_string("fs").as_deref(), Some("2"));
        assert_eq!(tasks[1].gold, "a\nb");
    }

    #[test]
    fn issues_name_records() {
        let err = parse(r#"[{"query":"q","gold":"g"},{"query":"q"},{"id":"0","query":"x","gold":"y"}]"#).unwrap_err();
        let DatasetError::Validation(issues) = err else { panic!("expected validation error") };
        assert_eq!(issues.len(), 2);
        assert_eq!(issues[0].index, 1);
        assert!(issues[0].message.contains("gold"));
        assert_eq!(issues[1].index, 2);
        assert!(issues[1].message.contains("duplicate"));
    }

    #[test]
    fn unknown_format() {
        assert!(matches!(parse("query,gold\n"), Err(DatasetError::Format(_))));
    }
}
