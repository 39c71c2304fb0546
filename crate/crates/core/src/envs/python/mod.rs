//! Interpreter environment.
//!
//! A mediator process inside the container keeps one Python namespace per
//! episode and answers length-prefixed JSON frames on its stdio (see
//! `mediator.py`). Submissions are graded by `grader.py`, which runs every
//! unit test in a fresh interpreter seeded with the submitted source.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::backend::{shell_quote, Attached, Backend, Container, ContainerSpec, StreamChunk};
use crate::episode::{EnvError, Environment, ErrorClass, Execution, GoldPlan, Submission, TaskInstance};
use crate::scoring::{PyRewardBreakdown, RewardBreakdown};

pub const DEFAULT_IMAGE: &str = "execbench/python:latest";
pub const TEST_TIMEOUT: Duration = Duration::from_secs(10);
pub const MEDIATOR_SOURCE: &str = include_str!("mediator.py");
pub const GRADER_SOURCE: &str = include_str!("grader.py");

const HOME: &str = "/opt/execbench";
const MEDIATOR_PATH: &str = "/opt/execbench/mediator.py";
const GRADER_PATH: &str = "/opt/execbench/grader.py";
const JOB_PATH: &str = "/opt/execbench/job.json";
const START_TIMEOUT: Duration = Duration::from_secs(30);
const MAX_FRAME: usize = 16 << 20;
const STDERR_TAIL: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MediatorOp {
    Exec,
    Eval,
    Reset,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MediatorRequest {
    pub op: MediatorOp,
    #[serde(default)]
    pub code: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MediatorReply {
    pub ok: bool,
    pub output: String,
    pub value: Option<String>,
}

/// 4-byte big-endian length, then the JSON body.
pub fn encode_frame<T: Serialize>(msg: &T) -> Vec<u8> {
    let body = serde_json::to_vec(msg).expect("serializable");
    let mut out = Vec::with_capacity(body.len() + 4);
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    out
}

/// Split one complete frame off the front of `buf`.
pub fn take_frame(buf: &mut Vec<u8>) -> Result<Option<Vec<u8>>, String> {
    if buf.len() < 4 {
        return Ok(None);
    }
    let n = u32::from_be_bytes([buf[0], buf[1], buf[2], buf[3]]) as usize;
    if n > MAX_FRAME {
        return Err(format!("frame of {n} bytes exceeds the limit"));
    }
    if buf.len() < 4 + n {
        return Ok(None);
    }
    let body = buf[4..4 + n].to_vec();
    buf.drain(..4 + n);
    Ok(Some(body))
}

#[derive(Debug)]
enum CallError {
    Timeout,
    Crashed(String),
    Protocol(String),
}

struct Mediator {
    proc: Box<dyn Attached>,
    buf: Vec<u8>,
    stderr: Vec<u8>,
}

impl Mediator {
    fn start(container: &dyn Container, python: &str) -> Result<Self, EnvError> {
        let argv = [python.to_string(), "-u".into(), MEDIATOR_PATH.into()];
        let proc = container.attach_raw(&argv)?;
        let mut m = Self {
            proc,
            buf: Vec::new(),
            stderr: Vec::new(),
        };
        match m.call(MediatorOp::Reset, "", START_TIMEOUT) {
            Ok(_) => Ok(m),
            Err(e) => Err(EnvError::Evaluation(format!("interpreter failed to start: {e:?}"))),
        }
    }

    fn call(&mut self, op: MediatorOp, code: &str, timeout: Duration) -> Result<MediatorReply, CallError> {
        let req = MediatorRequest { op, code: code.into() };
        if self.proc.send(&encode_frame(&req)).is_err() {
            return Err(CallError::Crashed(self.stderr_tail()));
        }
        let deadline = Instant::now() + timeout;
        loop {
            match take_frame(&mut self.buf) {
                Err(e) => return Err(CallError::Protocol(e)),
                Ok(Some(body)) => {
                    return serde_json::from_slice(&body).map_err(|e| CallError::Protocol(e.to_string()));
                }
                Ok(None) => {}
            }
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return Err(CallError::Timeout);
            }
            match self.proc.recv(left) {
                Some(StreamChunk::Stdout(d)) => self.buf.extend_from_slice(&d),
                Some(StreamChunk::Stderr(d)) => {
                    self.stderr.extend_from_slice(&d);
                    if self.stderr.len() > STDERR_TAIL {
                        self.stderr.drain(..self.stderr.len() - STDERR_TAIL);
                    }
                }
                Some(StreamChunk::Closed) => return Err(CallError::Crashed(self.stderr_tail())),
                None => return Err(CallError::Timeout),
            }
        }
    }

    fn stderr_tail(&self) -> String {
        String::from_utf8_lossy(&self.stderr).into_owned()
    }
}

impl Drop for Mediator {
    fn drop(&mut self) {
        self.proc.kill();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PythonConfig {
    pub image: String,
    /// Interpreter command inside the container.
    pub python: String,
    pub workdir: String,
    #[serde(with = "secs")]
    pub test_timeout: Duration,
}

mod secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_secs_f64(f64::deserialize(d)?))
    }
}

impl Default for PythonConfig {
    fn default() -> Self {
        Self {
            image: DEFAULT_IMAGE.into(),
            python: "python3".into(),
            workdir: "/workspace".into(),
            test_timeout: TEST_TIMEOUT,
        }
    }
}

impl PythonConfig {
    pub fn container_spec(&self) -> ContainerSpec {
        let mut spec = ContainerSpec::new(&self.image, &self.workdir);
        spec.paths = vec![HOME.into(), self.workdir.clone()];
        spec
    }
}

/// What the grader reports.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct GradeReport {
    pub passed: usize,
    pub total: usize,
    pub results: Vec<TestResult>,
    pub error: Option<String>,
    pub submission: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct TestResult {
    pub test: String,
    pub passed: bool,
    pub error: Option<String>,
}

pub struct PythonEnv {
    container: Box<dyn Container>,
    config: PythonConfig,
    mediator: Option<Mediator>,
    /// Admissible actions since the interpreter last started.
    transcript: Vec<String>,
    last_grade: Option<GradeReport>,
}

impl PythonEnv {
    pub fn new(backend: &dyn Backend, config: PythonConfig) -> Result<Self, EnvError> {
        let container = backend.provision(&config.container_spec())?;
        let env = Self {
            container,
            config,
            mediator: None,
            transcript: Vec::new(),
            last_grade: None,
        };
        if let Err(e) = env.install() {
            let _ = env.container.remove();
            return Err(e);
        }
        Ok(env)
    }

    pub fn container(&self) -> &dyn Container {
        self.container.as_ref()
    }

    /// Report from the most recent grading.
    pub fn last_grade(&self) -> Option<&GradeReport> {
        self.last_grade.as_ref()
    }

    /// Send a raw request to the interpreter session.
    pub fn request(&mut self, op: MediatorOp, code: &str, timeout: Duration) -> Result<MediatorReply, EnvError> {
        let m = self.session()?;
        m.call(op, code, timeout)
            .map_err(|e| EnvError::Evaluation(format!("interpreter call failed: {e:?}")))
    }

    fn install(&self) -> Result<(), EnvError> {
        // rewritten every time: the agent can reach these files
        self.container.write_file(MEDIATOR_PATH, MEDIATOR_SOURCE.as_bytes(), 0o644)?;
        self.container.write_file(GRADER_PATH, GRADER_SOURCE.as_bytes(), 0o644)?;
        Ok(())
    }

    fn session(&mut self) -> Result<&mut Mediator, EnvError> {
        if self.mediator.is_none() {
            self.mediator = Some(Mediator::start(self.container.as_ref(), &self.config.python)?);
        }
        Ok(self.mediator.as_mut().expect("just started"))
    }

    fn restart(&mut self) -> Result<(), EnvError> {
        self.mediator = None;
        self.transcript.clear();
        self.install()?;
        self.session().map(|_| ())
    }

    pub fn grade(&mut self, task: &TaskInstance, submission: Option<&str>) -> Result<GradeReport, EnvError> {
        let tests = task.extra_list("tests");
        let entry_point = task.extra_string("entry_point").unwrap_or_default();
        let mut job = json!({
            "tests": tests,
            "entry_point": entry_point,
            "timeout": self.config.test_timeout.as_secs_f64(),
        });
        match submission {
            Some(src) => job["submission"] = json!(src),
            None => job["actions"] = json!(self.transcript),
        }
        self.install()?;
        self.container
            .write_file(JOB_PATH, serde_json::to_string(&job).expect("json").as_bytes(), 0o644)?;
        let budget = self.config.test_timeout * (tests.len() as u32 + 1) + Duration::from_secs(30);
        let cmd = format!("{} {} {}", shell_quote(&self.config.python), GRADER_PATH, JOB_PATH);
        let r = self.container.exec_oneshot(&cmd, budget)?;
        let report: GradeReport = serde_json::from_slice(&r.stdout).map_err(|e| {
            EnvError::Evaluation(format!("grader output unreadable ({e}): {}", r.combined_text().trim()))
        })?;
        self.last_grade = Some(report.clone());
        Ok(report)
    }
}

impl Environment for PythonEnv {
    fn name(&self) -> &str {
        "python"
    }

    fn reset(&mut self, _task: &TaskInstance) -> Result<(), EnvError> {
        self.last_grade = None;
        let w = shell_quote(&self.config.workdir);
        let r = self.container.exec_oneshot(&format!("rm -rf {w} && mkdir -p {w}"), START_TIMEOUT)?;
        if !r.success() {
            return Err(EnvError::Evaluation(format!("clearing the work directory: {}", r.stderr_text())));
        }
        self.restart()
    }

    fn execute(&mut self, code: &str, timeout: Duration) -> Result<Execution, EnvError> {
        let outcome = self.session()?.call(MediatorOp::Exec, code, timeout);
        let exec = match outcome {
            Ok(reply) => {
                if reply.ok {
                    self.transcript.push(code.to_string());
                }
                Execution {
                    text: reply.output,
                    exit_status: None,
                    admissible: reply.ok,
                    error_class: if reply.ok { ErrorClass::None } else { ErrorClass::ExecError },
                    info: Default::default(),
                }
            }
            Err(e) => {
                let (text, class) = match e {
                    CallError::Timeout => (
                        format!("Execution timed out after {:.0}s.", timeout.as_secs_f64()),
                        ErrorClass::Timeout,
                    ),
                    CallError::Crashed(stderr) => (format!("{stderr}The interpreter exited."), ErrorClass::ExecError),
                    CallError::Protocol(msg) => (format!("Interpreter protocol error: {msg}."), ErrorClass::ProtocolError),
                };
                self.restart()?;
                let mut exec = Execution::failed(
                    format!("{text} The session was restarted and earlier definitions are lost.\n"),
                    class,
                );
                exec.info.insert("restarted".into(), json!(true));
                exec
            }
        };
        Ok(exec)
    }

    fn submit(&mut self, task: &TaskInstance, payload: Option<&str>, timeout: Duration) -> Result<Submission, EnvError> {
        let payload = payload.filter(|p| !p.trim().is_empty());
        let execution = match payload {
            Some(code) => Some(self.execute(code, timeout)?),
            None => None,
        };
        let report = self.grade(task, payload)?;
        let total = report.total.max(1);
        Ok(Submission {
            execution,
            breakdown: RewardBreakdown::Python(PyRewardBreakdown::new(report.passed, total)),
        })
    }

    fn validate_task(&self, task: &TaskInstance) -> Result<(), String> {
        let entry = task.extra_string("entry_point").ok_or("task has no entry_point")?;
        let tests = task.extra_list("tests");
        if tests.is_empty() {
            return Err("task has no tests".into());
        }
        if let Some(t) = tests.iter().find(|t| !t.contains(&entry)) {
            return Err(format!("test {t:?} does not reference {entry}"));
        }
        Ok(())
    }

    fn gold_plan(&self, task: &TaskInstance) -> GoldPlan {
        GoldPlan {
            actions: vec![task.gold.clone()],
            submit: None,
        }
    }

    fn config_snapshot(&self) -> Value {
        json!({
            "image": self.config.image,
            "python": self.config.python,
            "test_timeout_secs": self.config.test_timeout.as_secs_f64(),
            "test_isolation": "process_per_test",
        })
    }

    fn close(&mut self) -> Result<(), EnvError> {
        self.mediator = None;
        self.container.remove()?;
        Ok(())
    }
}
