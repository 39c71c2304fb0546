//! Capture-the-flag environment.
//!
//! A task is a bundle directory: `task.json` plus the files under `assets/`
//! that get copied into the sandbox before the first turn. Actions are shell
//! commands; the episode is won by submitting the exact flag.
//!
//! ```text
//! tasks/
//!   ctf-01/
//!     task.json      {"id", "instruction", "flag", "assets": [{src, dest, mode}], "solution": [...]}
//!     assets/...
//! ```

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::shell_execution;
use crate::backend::{shell_quote, Backend, Container, ContainerSpec};
use crate::episode::{Action, EnvError, Environment, Execution, GoldPlan, Submission, TaskInstance};
use crate::scoring::{flag_matches, RewardBreakdown};

pub const DEFAULT_IMAGE: &str = "execbench/ctf:latest";
pub const CTF_ROOT: &str = "/ctf";
pub const DEFAULT_FLAG_PATTERN: &str = r"^[A-Za-z0-9_]+\{[^{}\s]+\}$";
const SETUP_TIMEOUT: Duration = Duration::from_secs(60);

fn default_mode() -> String {
    "0644".into()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssetSpec {
    /// Relative to the bundle directory on disk; absolute once loaded.
    pub src: String,
    pub dest: String,
    /// Octal permission bits.
    #[serde(default = "default_mode")]
    pub mode: String,
}

impl AssetSpec {
    pub fn mode_bits(&self) -> Result<u32, String> {
        u32::from_str_radix(self.mode.trim_start_matches("0o"), 8)
            .ok()
            .filter(|m| *m <= 0o7777)
            .ok_or_else(|| format!("bad mode {:?} for {}", self.mode, self.dest))
    }
}

/// On-disk `task.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CtfTask {
    pub id: String,
    pub instruction: String,
    pub flag: String,
    #[serde(default)]
    pub assets: Vec<AssetSpec>,
    /// Commands that recover the flag, for oracle replay.
    #[serde(default)]
    pub solution: Vec<String>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl CtfTask {
    pub fn into_instance(self) -> TaskInstance {
        let mut t = TaskInstance::new(self.id, self.instruction, self.flag)
            .with_extra("assets", serde_json::to_value(&self.assets).expect("json"))
            .with_extra("solution", json!(self.solution));
        t.extras.extend(self.extra);
        t
    }
}

/// Load one bundle directory.
pub fn load_bundle(dir: &Path) -> Result<TaskInstance, EnvError> {
    let path = dir.join("task.json");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| EnvError::Argument(format!("{}: {e}", path.display())))?;
    let mut task: CtfTask =
        serde_json::from_str(&text).map_err(|e| EnvError::Argument(format!("{}: {e}", path.display())))?;
    for a in &mut task.assets {
        let src = dir.join(&a.src);
        if !src.is_file() {
            return Err(EnvError::Argument(format!("task {}: missing asset {}", task.id, src.display())));
        }
        a.src = src.to_string_lossy().into_owned();
    }
    Ok(task.into_instance())
}

/// Load every bundle under `root` (or `root/tasks`), ordered by directory
/// name.
pub fn load_bundles(root: &Path) -> Result<Vec<TaskInstance>, EnvError> {
    let root: PathBuf = if root.join("tasks").is_dir() { root.join("tasks") } else { root.to_path_buf() };
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(&root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("task.json").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(EnvError::Argument(format!("no task bundles under {}", root.display())));
    }
    dirs.iter().map(|d| load_bundle(d)).collect()
}

pub fn task_assets(task: &TaskInstance) -> Result<Vec<AssetSpec>, String> {
    match task.extras.get("assets") {
        None | Some(Value::Null) => Ok(Vec::new()),
        Some(v) => serde_json::from_value(v.clone()).map_err(|e| format!("bad assets: {e}")),
    }
}

fn check_assets(assets: &[AssetSpec], root: &str) -> Result<(), String> {
    let mut seen = BTreeSet::new();
    for a in assets {
        a.mode_bits()?;
        let dest = a.dest.trim_end_matches('/');
        if !dest.starts_with(&format!("{root}/")) || dest.split('/').any(|c| c == "..") {
            return Err(format!("asset destination {dest} is outside {root}"));
        }
        if !seen.insert(dest.to_string()) {
            return Err(format!("two assets share the destination {dest}"));
        }
    }
    Ok(())
}

/// Copy assets into the container with their modes.
pub fn stage_assets(container: &dyn Container, assets: &[AssetSpec], root: &str) -> Result<(), EnvError> {
    check_assets(assets, root).map_err(EnvError::Preprocess)?;
    for a in assets {
        let data = std::fs::read(&a.src).map_err(|e| EnvError::Preprocess(format!("asset {}: {e}", a.src)))?;
        let mode = a.mode_bits().map_err(EnvError::Preprocess)?;
        container.write_file(&a.dest, &data, mode)?;
    }
    Ok(())
}

/// Read an agent reply: `submit FLAG` submits, anything else (optionally
/// prefixed with `cmd `) is a shell command.
pub fn parse_action(text: &str) -> Action {
    let t = text.trim();
    let word = t.split_whitespace().next().unwrap_or("");
    if word.eq_ignore_ascii_case("submit") {
        let rest = t[word.len()..].trim();
        return Action::Submit((!rest.is_empty()).then(|| rest.to_string()));
    }
    match t.strip_prefix("cmd ") {
        Some(cmd) => Action::Code(cmd.trim().to_string()),
        None => Action::Code(t.to_string()),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CtfConfig {
    pub image: String,
    pub flag_pattern: String,
}

impl Default for CtfConfig {
    fn default() -> Self {
        Self {
            image: DEFAULT_IMAGE.into(),
            flag_pattern: DEFAULT_FLAG_PATTERN.into(),
        }
    }
}

impl CtfConfig {
    pub fn container_spec(&self) -> ContainerSpec {
        let mut spec = ContainerSpec::new(&self.image, CTF_ROOT);
        spec.paths = vec![CTF_ROOT.into()];
        spec
    }
}

pub struct CtfEnv {
    container: Box<dyn Container>,
    config: CtfConfig,
    pattern: Regex,
}

impl CtfEnv {
    pub fn new(backend: Arc<dyn Backend>, config: CtfConfig) -> Result<Self, EnvError> {
        let pattern = Regex::new(&config.flag_pattern)
            .map_err(|e| EnvError::Argument(format!("bad flag pattern: {e}")))?;
        let container = backend.provision(&config.container_spec())?;
        Ok(Self {
            container,
            config,
            pattern,
        })
    }

    pub fn container(&self) -> &dyn Container {
        self.container.as_ref()
    }
}

impl Environment for CtfEnv {
    fn name(&self) -> &str {
        "ctf"
    }

    fn reset(&mut self, task: &TaskInstance) -> Result<(), EnvError> {
        self.container.reset_session();
        let root = shell_quote(CTF_ROOT);
        let r = self
            .container
            .exec_oneshot(&format!("rm -rf {root} && mkdir -p {root}"), SETUP_TIMEOUT)?;
        if !r.success() {
            return Err(EnvError::Preprocess(format!("clearing {CTF_ROOT}: {}", r.stderr_text())));
        }
        let assets = task_assets(task).map_err(EnvError::Preprocess)?;
        stage_assets(self.container.as_ref(), &assets, CTF_ROOT)?;
        self.container.exec(&format!("cd {root}"), SETUP_TIMEOUT)?;
        Ok(())
    }

    fn execute(&mut self, code: &str, timeout: Duration) -> Result<Execution, EnvError> {
        let r = self.container.exec(code, timeout)?;
        if r.timed_out {
            self.container.exec(&format!("cd {}", shell_quote(CTF_ROOT)), SETUP_TIMEOUT)?;
        }
        Ok(shell_execution(&r))
    }

    fn submit(&mut self, task: &TaskInstance, payload: Option<&str>, _timeout: Duration) -> Result<Submission, EnvError> {
        let matched = payload.is_some_and(|p| flag_matches(p, &task.gold));
        Ok(Submission {
            execution: None,
            breakdown: RewardBreakdown::Ctf { matched },
        })
    }

    fn validate_task(&self, task: &TaskInstance) -> Result<(), String> {
        if !self.pattern.is_match(task.gold.trim()) {
            return Err(format!("flag does not match {}", self.config.flag_pattern));
        }
        let assets = task_assets(task)?;
        check_assets(&assets, CTF_ROOT)?;
        if let Some(a) = assets.iter().find(|a| !Path::new(&a.src).is_file()) {
            return Err(format!("missing asset {}", a.src));
        }
        Ok(())
    }

    fn gold_plan(&self, task: &TaskInstance) -> GoldPlan {
        GoldPlan {
            actions: task.extra_list("solution"),
            submit: Some(task.gold.clone()),
        }
    }

    fn config_snapshot(&self) -> Value {
        json!({
            "image": self.config.image,
            "flag_pattern": self.config.flag_pattern,
            "root": CTF_ROOT,
        })
    }

    fn close(&mut self) -> Result<(), EnvError> {
        self.container.remove()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn actions() {
        assert_eq!(parse_action("submit ctf{a b}\n"), Action::Submit(Some("ctf{a b}".into())));
        assert_eq!(parse_action("SUBMIT"), Action::Submit(None));
        assert_eq!(parse_action("cmd ls -la"), Action::code("ls -la"));
        assert_eq!(parse_action("python3 -c 'print(1)'"), Action::code("python3 -c 'print(1)'"));
        assert_eq!(parse_action("submitted"), Action::code("submitted"));
    }

    #[test]
    fn asset_checks() {
        let a = |dest: &str, mode: &str| AssetSpec {
            src: "x".into(),
            dest: dest.into(),
            mode: mode.into(),
        };
        assert!(check_assets(&[a("/ctf/a", "0755"), a("/ctf/b", "644")], "/ctf").is_ok());
        assert!(check_assets(&[a("/ctf/a", "0755"), a("/ctf/a/", "0644")], "/ctf").is_err());
        assert!(check_assets(&[a("/etc/passwd", "0644")], "/ctf").is_err());
        assert!(check_assets(&[a("/ctf/../etc", "0644")], "/ctf").is_err());
        assert!(check_assets(&[a("/ctf/a", "0999")], "/ctf").is_err());
    }
}
