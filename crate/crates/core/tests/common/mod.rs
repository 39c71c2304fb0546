#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use execbench::backend::local::LocalBackend;
use execbench::dataset;
use execbench::envs::bash::{BashConfig, BashEnv};
use execbench::envs::ctf::{load_bundles, CtfConfig, CtfEnv};
use execbench::envs::python::{PythonConfig, PythonEnv};
use execbench::envs::sql::{SqlConfig, SqlEnv};
use execbench::episode::{EngineConfig, EnvError, EnvHandle, Environment, TaskInstance};

pub const ENVS: [&str; 4] = ["bash", "sql", "python", "ctf"];

pub fn fixture(path: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(path)
}

pub fn tasks(env: &str) -> Vec<TaskInstance> {
    match env {
        "bash" => dataset::load(&fixture("bash/tasks.json")).unwrap().1,
        "sql" => dataset::load(&fixture("sql/tasks.jsonl")).unwrap().1,
        "python" => dataset::load(&fixture("python/tasks.json")).unwrap().1,
        "ctf" => load_bundles(&fixture("ctf")).unwrap(),
        other => panic!("unknown env {other}"),
    }
}

pub fn make_env(env: &str) -> Result<Box<dyn Environment>, EnvError> {
    let local = || Arc::new(LocalBackend::default());
    Ok(match env {
        "bash" => Box::new(BashEnv::new(local(), BashConfig::default())?),
        "sql" => Box::new(SqlEnv::new(SqlConfig::default(), None)?),
        "python" => Box::new(PythonEnv::new(&LocalBackend::default(), PythonConfig::default())?),
        "ctf" => Box::new(CtfEnv::new(local(), CtfConfig::default())?),
        other => panic!("unknown env {other}"),
    })
}

pub fn handle(env: &str) -> EnvHandle {
    EnvHandle::new(make_env(env).unwrap(), tasks(env), EngineConfig::default()).unwrap()
}
