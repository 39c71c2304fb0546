use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::ErrorClass;
use crate::scoring::RewardBreakdown;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Code,
    Submit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminatedBy {
    Submit,
    MaxTurns,
    Abort,
}

/// One logged action and the observation it produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub i: usize,
    pub action_kind: ActionKind,
    pub action: String,
    pub observation: String,
    pub admissible: bool,
    pub exit_status: Option<i64>,
    pub error_class: ErrorClass,
    #[serde(skip)]
    pub latency: Duration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrajectory {
    pub task_id: String,
    pub env: String,
    pub query: String,
    pub gold: String,
    pub turns: Vec<Turn>,
    /// Absent only for aborted episodes.
    pub reward: Option<f64>,
    pub reward_breakdown: RewardBreakdown,
    pub terminated_by: TerminatedBy,
    /// Environment configuration plus `extras` (the task's extras) and
    /// `wall_time_secs`.
    pub config_snapshot: Value,
}

impl EpisodeTrajectory {
    pub fn extras(&self) -> Option<&serde_json::Map<String, Value>> {
        self.config_snapshot.get("extras").and_then(Value::as_object)
    }

    pub fn wall_time(&self) -> Option<Duration> {
        self.config_snapshot
            .get("wall_time_secs")
            .and_then(Value::as_f64)
            .filter(|s| s.is_finite() && *s >= 0.0)
            .map(Duration::from_secs_f64)
    }

    pub fn actions(&self) -> impl Iterator<Item = (ActionKind, &str)> {
        self.turns.iter().map(|t| (t.action_kind, t.action.as_str()))
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let bytes = std::fs::read(path)?;
        serde_json::from_slice(&bytes).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    /// Write to `dir/<env>_<task_id>_<timestamp>.json`. Names never collide:
    /// a numeric suffix is added when another writer got there first.
    pub fn save(&self, dir: &Path) -> std::io::Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.6fZ");
        let stem = format!("{}_{}_{stamp}", sanitize(&self.env), sanitize(&self.task_id));
        let body = serde_json::to_vec_pretty(self).map_err(std::io::Error::other)?;
        for n in 0u32.. {
            let name = if n == 0 { format!("{stem}.json") } else { format!("{stem}-{n}.json") };
            let path = dir.join(name);
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    f.write_all(&body)?;
                    f.write_all(b"\n")?;
                    return Ok(path);
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(e),
            }
        }
        unreachable!("u32 range exhausted")
    }
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-.".contains(c) { c } else { '-' })
        .collect()
}
