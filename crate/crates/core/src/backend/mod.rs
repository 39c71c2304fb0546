//! Sandbox backends.
//!
//! A [`Backend`] provisions [`Container`]s from a [`ContainerSpec`]. Two
//! implementations ship:
//!
//! * [`docker::DockerBackend`] talks to a container engine over its HTTP API
//!   (unix socket or TCP).
//! * [`local::LocalBackend`] runs commands as host processes inside a private
//!   directory tree. The environment's absolute paths (`/testbed`, `/ctf`,
//!   ...) are remapped into that tree. It offers no isolation from the host
//!   and is meant for trusted code such as fixture validation and tests.
//!
//! Containers whose spec asks for [`EntryMode::LongRunningShell`] route
//! [`Container::exec`] through one persistent `bash` process per container,
//! so `cd` and shell variables survive across calls.

pub mod docker;
pub mod local;
pub mod shell;

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use shell::ShellSession;

/// Exit status recorded for commands killed by the timeout.
pub const TIMEOUT_EXIT_STATUS: i64 = -1;

/// Raw output kept per stream before anything downstream sees it.
pub const OUTPUT_CAP: usize = 1 << 20;

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("container engine unreachable at {endpoint}: {source}")]
    Unreachable {
        endpoint: String,
        #[source]
        source: std::io::Error,
    },
    #[error("provisioning failed: {0}")]
    Provision(String),
    #[error("init command `{command}` exited with {status}: {stderr}")]
    InitFailed {
        command: String,
        status: i64,
        stderr: String,
    },
    #[error("reset command `{command}` exited with {status}: {stderr}")]
    ResetFailed {
        command: String,
        status: i64,
        stderr: String,
    },
    #[error("container {0} is not running")]
    Dead(String),
    #[error("{0} is a directory")]
    IsDirectory(String),
    #[error("engine API error ({status}): {message}")]
    Api { status: u16, message: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Protocol(String),
}

/// `docker`, `local`, or `auto` (docker when an engine answers, else local).
pub fn from_name(name: &str) -> Result<Arc<dyn Backend>, BackendError> {
    match name {
        "local" => Ok(Arc::new(local::LocalBackend::default())),
        "docker" => {
            let d = docker::DockerBackend::from_env()?;
            d.client().ping()?;
            Ok(Arc::new(d))
        }
        "auto" => match docker::DockerBackend::from_env() {
            Ok(d) if d.available() => Ok(Arc::new(d)),
            _ => {
                log::info!("no container engine reachable; using the local backend");
                Ok(Arc::new(local::LocalBackend::default()))
            }
        },
        other => Err(BackendError::Provision(format!("unknown backend {other:?} (expected docker, local or auto)"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EntryMode {
    /// One persistent shell per container; `exec` is stateful.
    #[default]
    LongRunningShell,
    /// The image runs its own entrypoint (a database, say); every `exec` is
    /// a fresh process.
    Service,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainerSpec {
    pub image: String,
    #[serde(default)]
    pub entry_mode: EntryMode,
    /// Commands run in order after start; any nonzero exit fails provisioning.
    #[serde(default)]
    pub init_script: Vec<String>,
    #[serde(default)]
    pub env_vars: BTreeMap<String, String>,
    pub workdir: String,
    /// Absolute directories the environment owns. They are created at
    /// provision time; the local backend maps them into its private tree.
    #[serde(default)]
    pub paths: Vec<String>,
    /// Per-exec timeout used for init commands.
    #[serde(default = "default_init_timeout", with = "duration_secs")]
    pub init_timeout: Duration,
}

fn default_init_timeout() -> Duration {
    Duration::from_secs(120)
}

impl ContainerSpec {
    pub fn new(image: impl Into<String>, workdir: impl Into<String>) -> Self {
        Self {
            image: image.into(),
            entry_mode: EntryMode::LongRunningShell,
            init_script: Vec::new(),
            env_vars: BTreeMap::new(),
            workdir: workdir.into(),
            paths: Vec::new(),
            init_timeout: default_init_timeout(),
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.image.trim().is_empty() {
            return Err(BackendError::Provision("image name is empty".into()));
        }
        if !self.workdir.starts_with('/') {
            return Err(BackendError::Provision(format!(
                "workdir must be absolute, got {:?}",
                self.workdir
            )));
        }
        for p in &self.paths {
            if !p.starts_with('/') || p == "/" {
                return Err(BackendError::Provision(format!("owned path {p:?} must be absolute and not `/`")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ExecResult {
    pub stdout: Vec<u8>,
    pub stderr: Vec<u8>,
    pub exit_status: i64,
    pub duration: Duration,
    pub timed_out: bool,
}

impl ExecResult {
    pub fn stdout_text(&self) -> String {
        String::from_utf8_lossy(&self.stdout).into_owned()
    }

    pub fn stderr_text(&self) -> String {
        String::from_utf8_lossy(&self.stderr).into_owned()
    }

    /// stdout followed by stderr.
    pub fn combined_text(&self) -> String {
        let mut s = self.stdout_text();
        s.push_str(&self.stderr_text());
        s
    }

    pub fn success(&self) -> bool {
        !self.timed_out && self.exit_status == 0
    }
}

/// One chunk read from an attached process.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StreamChunk {
    Stdout(Vec<u8>),
    Stderr(Vec<u8>),
    Closed,
}

/// A process inside a container with stdin attached.
pub trait Attached: Send {
    fn send(&mut self, data: &[u8]) -> std::io::Result<()>;
    /// Next chunk, or `None` when nothing arrived within `timeout`.
    fn recv(&mut self, timeout: Duration) -> Option<StreamChunk>;
    /// Kill the process and everything it spawned.
    fn kill(&mut self);
}

pub trait Backend: Send + Sync {
    fn kind(&self) -> &'static str;
    fn provision(&self, spec: &ContainerSpec) -> Result<Box<dyn Container>, BackendError>;
    /// Ids of containers this backend manages that still exist.
    fn list(&self) -> Result<Vec<String>, BackendError>;
}

/// A provisioned sandbox. Calls on one container are serialized internally.
pub trait Container: Send + Sync {
    fn id(&self) -> &str;

    /// Run a command. Stateful under [`EntryMode::LongRunningShell`].
    fn exec(&self, command: &str, timeout: Duration) -> Result<ExecResult, BackendError>;

    /// Run a command in a fresh `bash -c`, never touching the shell session.
    fn exec_oneshot(&self, command: &str, timeout: Duration) -> Result<ExecResult, BackendError>;

    /// Start `argv` with stdin attached.
    fn attach(&self, argv: &[String]) -> Result<Box<dyn Attached>, BackendError>;

    /// Like [`Container::attach`], for byte-exact protocols: output is
    /// delivered untouched even where `attach` would post-process it.
    fn attach_raw(&self, argv: &[String]) -> Result<Box<dyn Attached>, BackendError> {
        self.attach(argv)
    }

    /// Hex md5 of the file at `path`, or `None` when nothing is there.
    fn hash_file(&self, path: &str) -> Result<Option<String>, BackendError>;

    fn write_file(&self, path: &str, contents: &[u8], mode: u32) -> Result<(), BackendError>;

    fn read_file(&self, path: &str) -> Result<Option<Vec<u8>>, BackendError>;

    /// Drop the persistent shell (cwd, variables); the next `exec` starts a
    /// fresh one.
    fn reset_session(&self);

    /// Stop and delete. Idempotent.
    fn remove(&self) -> Result<(), BackendError>;

    fn is_alive(&self) -> bool;

    /// Address other processes can reach the container's services on.
    fn network_address(&self) -> Result<Option<String>, BackendError> {
        Ok(None)
    }
}

/// Restore a container's watched tree by running `reset_commands` in order.
pub fn snapshot_reset(container: &dyn Container, reset_commands: &[String]) -> Result<(), BackendError> {
    for command in reset_commands {
        let r = container.exec_oneshot(command, Duration::from_secs(120))?;
        if !r.success() {
            return Err(BackendError::ResetFailed {
                command: command.clone(),
                status: r.exit_status,
                stderr: r.stderr_text(),
            });
        }
    }
    Ok(())
}

pub(crate) fn run_init_script(container: &dyn Container, spec: &ContainerSpec) -> Result<(), BackendError> {
    for command in &spec.init_script {
        let r = container.exec_oneshot(command, spec.init_timeout)?;
        if !r.success() {
            return Err(BackendError::InitFailed {
                command: command.clone(),
                status: r.exit_status,
                stderr: r.stderr_text(),
            });
        }
    }
    Ok(())
}

/// Shell-quote a single word.
pub fn shell_quote(s: &str) -> String {
    if !s.is_empty()
        && s.bytes()
            .all(|b| b.is_ascii_alphanumeric() || b"_-./=:@%+,".contains(&b))
    {
        return s.to_string();
    }
    format!("'{}'", s.replace('\'', r"'\''"))
}

/// Appends to a capped buffer; returns false once bytes were dropped.
pub(crate) fn push_capped(buf: &mut Vec<u8>, data: &[u8]) -> bool {
    let room = OUTPUT_CAP.saturating_sub(buf.len());
    let take = room.min(data.len());
    buf.extend_from_slice(&data[..take]);
    take == data.len()
}

pub(crate) mod duration_secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        if !(secs.is_finite() && secs >= 0.0) {
            return Err(serde::de::Error::custom("duration must be a nonnegative number of seconds"));
        }
        Ok(Duration::from_secs_f64(secs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quoting() {
        assert_eq!(shell_quote("/testbed/a.txt"), "/testbed/a.txt");
        assert_eq!(shell_quote("special text3.txt"), "'special text3.txt'");
        assert_eq!(shell_quote("it's"), r"'it'\''s'");
        assert_eq!(shell_quote(""), "''");
    }

    #[test]
    fn spec_validation() {
        assert!(ContainerSpec::new("", "/").validate().is_err());
        assert!(ContainerSpec::new("ubuntu", "rel").validate().is_err());
        let mut s = ContainerSpec::new("ubuntu", "/");
        s.paths.push("/".into());
        assert!(s.validate().is_err());
        s.paths = vec!["/testbed".into()];
        assert!(s.validate().is_ok());
    }

    #[test]
    fn capped_buffer() {
        let mut b = Vec::new();
        assert!(push_capped(&mut b, &vec![0u8; OUTPUT_CAP - 1]));
        assert!(!push_capped(&mut b, b"xy"));
        assert_eq!(b.len(), OUTPUT_CAP);
    }
}
