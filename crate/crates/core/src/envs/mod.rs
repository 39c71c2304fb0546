//! The shipped environments.

pub mod bash;
pub mod ctf;
pub mod python;
pub mod sql;

use std::path::Path;
use std::sync::Arc;

use serde::Deserialize;
use serde_json::Value;

use crate::backend::{Backend, ExecResult};
use crate::episode::{EnvError, Environment, ErrorClass, Execution, TaskInstance};

pub const NAMES: [&str; 4] = ["bash", "sql", "python", "ctf"];

/// Per-environment settings as they arrive from a config file, the command
/// line or the wire. Every field is optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default)]
pub struct EnvOptions {
    /// Container image override.
    pub image: Option<String>,
    /// Bash file system used when a task has no `fs` extra.
    pub filesystem: Option<String>,
    /// SQL engine; SQLite on the local backend and a MySQL container
    /// otherwise when absent.
    pub sql: Option<sql::SqlConfig>,
    /// Regex a CTF flag must match.
    pub flag_pattern: Option<String>,
}

impl EnvOptions {
    pub fn from_value(v: &Value) -> Result<Self, EnvError> {
        if v.is_null() {
            return Ok(Self::default());
        }
        serde_json::from_value(v.clone()).map_err(|e| EnvError::Argument(format!("environment options: {e}")))
    }
}

/// Build environment `name` on `backend`.
pub fn open(name: &str, backend: Arc<dyn Backend>, options: &EnvOptions) -> Result<Box<dyn Environment>, EnvError> {
    Ok(match name {
        "bash" => {
            let mut c = bash::BashConfig::default();
            if let Some(i) = &options.image {
                c.image = i.clone();
            }
            if let Some(f) = &options.filesystem {
                c.filesystem_id = f.clone();
            }
            Box::new(bash::BashEnv::new(backend, c)?)
        }
        "sql" => {
            let c = match &options.sql {
                Some(c) => c.clone(),
                None if backend.kind() == "local" => sql::SqlConfig::default(),
                None => sql::SqlConfig {
                    engine: sql::SqlEngineConfig::MysqlContainer {
                        image: options.image.clone().unwrap_or_else(|| sql::DEFAULT_IMAGE.into()),
                        root_password: "execbench".into(),
                    },
                    reset_script: None,
                },
            };
            Box::new(sql::SqlEnv::new(c, Some(backend))?)
        }
        "python" => {
            let mut c = python::PythonConfig::default();
            if let Some(i) = &options.image {
                c.image = i.clone();
            }
            Box::new(python::PythonEnv::new(backend.as_ref(), c)?)
        }
        "ctf" => {
            let mut c = ctf::CtfConfig::default();
            if let Some(i) = &options.image {
                c.image = i.clone();
            }
            if let Some(p) = &options.flag_pattern {
                c.flag_pattern = p.clone();
            }
            Box::new(ctf::CtfEnv::new(backend, c)?)
        }
        other => {
            return Err(EnvError::Argument(format!(
                "unknown environment {other:?} (expected one of {})",
                NAMES.join(", ")
            )))
        }
    })
}

/// Load the tasks for `name` from `path`: a dataset file, or for CTF a
/// directory of task bundles.
pub fn load_tasks(name: &str, path: &Path) -> Result<Vec<TaskInstance>, EnvError> {
    if name == "ctf" && path.is_dir() {
        return ctf::load_bundles(path);
    }
    crate::dataset::load(path)
        .map(|(_, tasks)| tasks)
        .map_err(|e| EnvError::Argument(e.to_string()))
}

/// Shell-style feedback: stdout then stderr. A command counts as admissible
/// unless it timed out or exited nonzero with something on stderr.
pub(crate) fn shell_execution(r: &ExecResult) -> Execution {
    let admissible = !r.timed_out && (r.exit_status == 0 || r.stderr.is_empty());
    let error_class = if r.timed_out {
        ErrorClass::Timeout
    } else if !admissible {
        ErrorClass::ExecError
    } else {
        ErrorClass::None
    };
    let mut text = r.combined_text();
    if r.timed_out {
        if !text.is_empty() && !text.ends_with('\n') {
            text.push('\n');
        }
        text.push_str(&format!("Command timed out after {:.0}s", r.duration.as_secs_f64()));
    }
    Execution {
        text,
        exit_status: Some(r.exit_status),
        admissible,
        error_class,
        info: Default::default(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::Duration;

    fn result(stdout: &str, stderr: &str, status: i64, timed_out: bool) -> ExecResult {
        ExecResult {
            stdout: stdout.into(),
            stderr: stderr.into(),
            exit_status: status,
            duration: Duration::from_secs(2),
            timed_out,
        }
    }

    #[test]
    fn admissibility() {
        assert!(shell_execution(&result("hi\n", "", 0, false)).admissible);
        // grep with no match
        assert!(shell_execution(&result("", "", 1, false)).admissible);
        let e = shell_execution(&result("", "bash: asdf: command not found\n", 127, false));
        assert!(!e.admissible);
        assert_eq!(e.error_class, ErrorClass::ExecError);
        let e = shell_execution(&result("partial", "", -1, true));
        assert_eq!(e.error_class, ErrorClass::Timeout);
        assert_eq!(e.text, "partial\nCommand timed out after 2s");
    }
}
