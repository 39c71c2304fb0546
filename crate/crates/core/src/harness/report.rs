//! Success rate, Error % and mean turns over a directory of trajectories.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use crate::episode::{EnvError, EpisodeTrajectory, MetricsSummary, Tally};

pub const UNGROUPED: &str = "ungrouped";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupRow {
    pub group: String,
    pub metrics: MetricsSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub group_by: Option<String>,
    pub groups: Vec<GroupRow>,
    pub overall: MetricsSummary,
    /// Files that could not be read as trajectories, with the reason.
    pub skipped: Vec<(PathBuf, String)>,
}

fn group_value(t: &EpisodeTrajectory, key: &str) -> String {
    match t.extras().and_then(|e| e.get(key)) {
        None | Some(Value::Null) => UNGROUPED.into(),
        Some(Value::String(s)) => s.clone(),
        Some(v) => v.to_string(),
    }
}

/// Summarize every `*.json` trajectory in `dir`, optionally grouped by a
/// task extras key.
pub fn report(dir: &Path, group_by: Option<&str>) -> Result<Report, EnvError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| EnvError::Argument(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json") && p.is_file())
        .collect();
    paths.sort();
    let mut overall = Tally::default();
    let mut groups: BTreeMap<String, Tally> = BTreeMap::new();
    let mut skipped = Vec::new();
    for p in paths {
        match EpisodeTrajectory::load(&p) {
            Ok(t) => {
                overall.add(&t);
                if let Some(key) = group_by {
                    groups.entry(group_value(&t, key)).or_default().add(&t);
                }
            }
            Err(e) => {
                log::warn!("skipping {}: {e}", p.display());
                skipped.push((p, e.to_string()));
            }
        }
    }
    let overall = overall
        .summary()
        .ok_or_else(|| EnvError::Argument(format!("no trajectories in {}", dir.display())))?;
    Ok(Report {
        group_by: group_by.map(str::to_string),
        groups: groups
            .into_iter()
            .filter_map(|(group, t)| t.summary().map(|metrics| GroupRow { group, metrics }))
            .collect(),
        overall,
        skipped,
    })
}

impl Report {
    /// Success rate in percent, one decimal, for `group` (`None` for all).
    pub fn success_pct(&self, group: Option<&str>) -> Option<f64> {
        let m = match group {
            None => Some(&self.overall),
            Some(g) => self.groups.iter().find(|r| r.group == g).map(|r| &r.metrics),
        }?;
        Some((m.success_rate * 1000.0).round() / 10.0)
    }

    pub fn to_json(&self) -> Value {
        let row = |name: &str, m: &MetricsSummary| {
            serde_json::json!({
                "group": name,
                "episodes": m.episode_count,
                "success_rate": m.success_rate,
                "error_pct": m.error_pct,
                "mean_turns": m.mean_turns,
            })
        };
        let mut rows: Vec<Value> = self.groups.iter().map(|r| row(&r.group, &r.metrics)).collect();
        rows.push(row("all", &self.overall));
        serde_json::json!({
            "group_by": self.group_by,
            "rows": rows,
            "skipped": self.skipped.iter().map(|(p, e)| serde_json::json!({"path": p, "error": e})).collect::<Vec<_>>(),
        })
    }

    pub fn render_text(&self) -> String {
        let header = self.group_by.as_deref().unwrap_or("group");
        let mut rows: Vec<(String, &MetricsSummary)> =
            self.groups.iter().map(|r| (r.group.clone(), &r.metrics)).collect();
        rows.push(("all".into(), &self.overall));
        let width = rows.iter().map(|(g, _)| g.len()).chain([header.len()]).max().unwrap_or(5);
        let mut out = format!(
            "{header:<width$}  {:>8}  {:>7}  {:>8}  {:>10}\n",
            "episodes", "SR %", "Error %", "mean turns"
        );
        for (g, m) in rows {
            out.push_str(&format!(
                "{g:<width$}  {:>8}  {:>7.1}  {:>8.1}  {:>10.2}\n",
                m.episode_count,
                m.success_rate * 100.0,
                m.error_pct,
                m.mean_turns
            ));
        }
        if !self.skipped.is_empty() {
            out.push_str(&format!("skipped {} unreadable file(s)\n", self.skipped.len()));
        }
        out
    }
}
