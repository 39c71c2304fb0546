//! Shell environment over fixture file systems.
//!
//! Each container holds three fixture trees, each snapshotted into a git
//! directory kept outside the tree. A task's `fs` extra picks the tree the
//! shell starts in. Gold commands run in a twin container built from the
//! same spec; file-system deltas come from `git status` on both sides.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::Duration;

use serde_json::{json, Value};

use super::shell_execution;
use crate::backend::{shell_quote, snapshot_reset, Backend, Container, ContainerSpec};
use crate::episode::{EnvError, Environment, Execution, Submission, TaskInstance};
use crate::scoring::{bash_reward, ChangeKind, FsChange, RewardBreakdown};

pub const SNAPSHOT_DIR: &str = "/.snapshots";
pub const DEFAULT_IMAGE: &str = "execbench/bash:latest";
const GIT_TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FsTree {
    pub id: &'static str,
    pub name: &'static str,
    pub root: &'static str,
    pub script: &'static str,
    /// Permission fixups git cannot record, applied after every restore.
    pub modes: &'static str,
}

pub const FS_TREES: [FsTree; 3] = [
    FsTree {
        id: "1",
        name: "testbed",
        root: "/testbed",
        script: include_str!("../../fixtures/bash/testbed.sh"),
        modes: "",
    },
    FsTree {
        id: "2",
        name: "system",
        root: "/system",
        script: include_str!("../../fixtures/bash/system.sh"),
        modes: "",
    },
    FsTree {
        id: "3",
        name: "workspace",
        root: "/workspace",
        script: include_str!("../../fixtures/bash/workspace.sh"),
        modes: "chmod 444 /workspace/dir1/readonly.txt",
    },
];

/// Look a tree up by id (`"2"`), name (`"system"`) or root (`"/system"`).
pub fn find_tree(key: &str) -> Option<&'static FsTree> {
    let key = key.trim();
    FS_TREES.iter().find(|t| t.id == key || t.name == key || t.root == key)
}

impl FsTree {
    fn git(&self) -> String {
        format!("git --git-dir={SNAPSHOT_DIR}/{}.git --work-tree={}", self.name, self.root)
    }

    fn normalize_modes(&self) -> String {
        let mut cmd = format!("chmod -R u=rwX,go=rX {}", self.root);
        if !self.modes.is_empty() {
            cmd.push_str(" && ");
            cmd.push_str(self.modes);
        }
        cmd
    }

    /// Build the tree and record the snapshot.
    pub fn build_commands(&self) -> Vec<String> {
        let git = self.git();
        vec![
            self.script.to_string(),
            self.normalize_modes(),
            format!(
                "mkdir -p {SNAPSHOT_DIR} && rm -rf {SNAPSHOT_DIR}/{name}.git && cd / && \
                 {git} -c init.defaultBranch=main init -q && {git} add -A && \
                 {git} -c user.name=execbench -c user.email=execbench@localhost -c commit.gpgsign=false \
                 commit -q --no-verify -m snapshot",
                name = self.name
            ),
        ]
    }

    /// Restore the tree to its snapshot.
    pub fn reset_commands(&self) -> Vec<String> {
        let git = self.git();
        vec![
            format!("mkdir -p {r} && chmod -R u=rwX,go=rX {r}", r = self.root),
            format!("cd / && {git} reset -q --hard && {git} clean -fdxq"),
            self.normalize_modes(),
        ]
    }

    fn status_command(&self) -> String {
        // mode-only edits are invisible so content-identical files never count
        format!(
            "cd / && {} -c core.fileMode=false -c core.quotepath=off status --porcelain -z -uall",
            self.git()
        )
    }
}

/// Parse `git status --porcelain -z` output into changes under `root`.
pub fn parse_status(raw: &[u8], root: &str) -> Vec<FsChange> {
    let mut out = Vec::new();
    let mut entries = raw.split(|b| *b == 0).filter(|e| !e.is_empty());
    while let Some(entry) = entries.next() {
        if entry.len() < 4 {
            continue;
        }
        let (x, y) = (entry[0], entry[1]);
        let path = String::from_utf8_lossy(&entry[3..]).into_owned();
        if x == b'R' || x == b'C' {
            // the source path follows as its own entry
            let _ = entries.next();
        }
        let kind = match (x, y) {
            (b'?', _) | (b'A', _) | (_, b'A') => ChangeKind::Added,
            (b'D', _) | (_, b'D') => ChangeKind::Deleted,
            _ => ChangeKind::Changed,
        };
        out.push(FsChange::new(format!("{}/{}", root.trim_end_matches('/'), path), kind));
    }
    out
}

#[derive(Debug, Clone)]
pub struct BashConfig {
    pub image: String,
    /// Tree used when a task has no `fs` extra.
    pub filesystem_id: String,
    pub init_timeout: Duration,
}

impl Default for BashConfig {
    fn default() -> Self {
        Self {
            image: DEFAULT_IMAGE.to_string(),
            filesystem_id: "1".to_string(),
            init_timeout: Duration::from_secs(300),
        }
    }
}

impl BashConfig {
    pub fn container_spec(&self) -> ContainerSpec {
        let mut spec = ContainerSpec::new(self.image.clone(), "/");
        spec.paths = FS_TREES.iter().map(|t| t.root.to_string()).collect();
        spec.paths.push(SNAPSHOT_DIR.to_string());
        spec.init_script = FS_TREES.iter().flat_map(FsTree::build_commands).collect();
        spec.init_timeout = self.init_timeout;
        spec
    }
}

struct GoldState {
    output: String,
    changes: Vec<FsChange>,
}

pub struct BashEnv {
    config: BashConfig,
    agent: Box<dyn Container>,
    twin: Box<dyn Container>,
    tree: &'static FsTree,
    latest: String,
    gold: Option<GoldState>,
}

impl BashEnv {
    /// Provision the agent container and its twin.
    pub fn new(backend: Arc<dyn Backend>, config: BashConfig) -> Result<Self, EnvError> {
        let tree = find_tree(&config.filesystem_id)
            .ok_or_else(|| EnvError::Argument(format!("unknown file system {:?}", config.filesystem_id)))?;
        let spec = config.container_spec();
        let agent = backend.provision(&spec)?;
        let twin = backend.provision(&spec)?;
        Ok(Self {
            config,
            agent,
            twin,
            tree,
            latest: String::new(),
            gold: None,
        })
    }

    fn tree_for(&self, task: &TaskInstance) -> Result<&'static FsTree, EnvError> {
        match task.extra_string("fs") {
            Some(key) => find_tree(&key).ok_or_else(|| EnvError::Argument(format!("unknown file system {key:?}"))),
            None => find_tree(&self.config.filesystem_id)
                .ok_or_else(|| EnvError::Argument(format!("unknown file system {:?}", self.config.filesystem_id))),
        }
    }

    pub fn agent(&self) -> &dyn Container {
        self.agent.as_ref()
    }

    /// Current file-system delta in the agent container.
    pub fn agent_changes(&self) -> Result<Vec<FsChange>, EnvError> {
        detect_fs_changes(self.agent.as_ref())
    }

    fn enter(container: &dyn Container, tree: &FsTree) -> Result<(), EnvError> {
        container.reset_session();
        for t in &FS_TREES {
            snapshot_reset(container, &t.reset_commands())?;
        }
        let r = container.exec(&format!("cd {}", shell_quote(tree.root)), GIT_TIMEOUT)?;
        if !r.success() {
            return Err(EnvError::Evaluation(format!("cannot enter {}: {}", tree.root, r.stderr_text())));
        }
        Ok(())
    }

    fn gold_state(&mut self, task: &TaskInstance, timeout: Duration) -> Result<&GoldState, EnvError> {
        if self.gold.is_none() {
            Self::enter(self.twin.as_ref(), self.tree)?;
            let mut output = String::new();
            for action in self.gold_plan(task).actions {
                let r = self.twin.exec(&action, timeout)?;
                if r.timed_out {
                    return Err(EnvError::Evaluation(format!("gold command timed out: {action}")));
                }
                output = r.combined_text();
            }
            let changes = detect_fs_changes(self.twin.as_ref())?;
            self.gold = Some(GoldState { output, changes });
        }
        Ok(self.gold.as_ref().expect("just computed"))
    }

    fn score(&mut self, task: &TaskInstance, timeout: Duration) -> Result<RewardBreakdown, EnvError> {
        let agent_fs = detect_fs_changes(self.agent.as_ref())?;
        let latest = self.latest.clone();
        let gold = self.gold_state(task, timeout)?;
        let (gold_out, gold_fs) = (gold.output.clone(), gold.changes.clone());

        let a: BTreeSet<&FsChange> = agent_fs.iter().collect();
        let g: BTreeSet<&FsChange> = gold_fs.iter().collect();
        let mut matches = BTreeMap::new();
        for c in a.intersection(&g) {
            let same = self.agent.hash_file(&c.path)? == self.twin.hash_file(&c.path)?;
            matches.insert(c.path.clone(), same);
        }
        let breakdown = bash_reward(&latest, &gold_out, &agent_fs, &gold_fs, |p| {
            matches.get(p).copied().unwrap_or(false)
        });
        Ok(RewardBreakdown::Bash(breakdown))
    }
}

/// File-system delta across all fixture trees, sorted by path.
pub fn detect_fs_changes(container: &dyn Container) -> Result<Vec<FsChange>, EnvError> {
    let mut all = Vec::new();
    for t in &FS_TREES {
        let r = container.exec_oneshot(&t.status_command(), GIT_TIMEOUT)?;
        if !r.success() {
            return Err(EnvError::Infrastructure(crate::backend::BackendError::Protocol(format!(
                "git status in {} failed: {}",
                t.root,
                r.stderr_text()
            ))));
        }
        all.extend(parse_status(&r.stdout, t.root));
    }
    all.sort();
    all.dedup();
    Ok(all)
}

impl Environment for BashEnv {
    fn name(&self) -> &str {
        "bash"
    }

    fn reset(&mut self, task: &TaskInstance) -> Result<(), EnvError> {
        self.tree = self.tree_for(task)?;
        self.latest.clear();
        self.gold = None;
        Self::enter(self.agent.as_ref(), self.tree)
    }

    fn execute(&mut self, code: &str, timeout: Duration) -> Result<Execution, EnvError> {
        let r = self.agent.exec(code, timeout)?;
        let exec = shell_execution(&r);
        self.latest = r.combined_text();
        if r.timed_out {
            // the killed session restarts at `/`
            self.agent.exec(&format!("cd {}", shell_quote(self.tree.root)), GIT_TIMEOUT)?;
        }
        Ok(exec)
    }

    fn submit(&mut self, task: &TaskInstance, payload: Option<&str>, timeout: Duration) -> Result<Submission, EnvError> {
        let execution = match payload.map(str::trim).filter(|p| !p.is_empty()) {
            Some(code) => Some(self.execute(code, timeout)?),
            None => None,
        };
        let breakdown = self.score(task, timeout)?;
        Ok(Submission { execution, breakdown })
    }

    fn interim_reward(&mut self, task: &TaskInstance, timeout: Duration) -> Result<Option<RewardBreakdown>, EnvError> {
        self.score(task, timeout).map(Some)
    }

    fn validate_task(&self, task: &TaskInstance) -> Result<(), String> {
        match task.extra_string("fs") {
            Some(key) if find_tree(&key).is_none() => Err(format!("unknown file system {key:?}")),
            _ => Ok(()),
        }
    }

    fn config_snapshot(&self) -> Value {
        json!({
            "image": self.config.image,
            "filesystem_id": self.config.filesystem_id,
            "watched_roots": FS_TREES.iter().map(|t| t.root).collect::<Vec<_>>(),
            "gold_evaluation": "twin",
        })
    }

    fn close(&mut self) -> Result<(), EnvError> {
        let a = self.agent.remove();
        let b = self.twin.remove();
        a?;
        b?;
        Ok(())
    }
}
