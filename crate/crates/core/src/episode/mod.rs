//! Episode engine.
//!
//! An [`Environment`] supplies the hooks (reset a container, execute one
//! action, score a submission). [`EnvHandle`] wraps one with a dataset and
//! owns the lifecycle: task selection, turn logging, truncation, reward
//! emission and trajectory persistence.
//!
//! ```text
//! reset ──▶ step(code)* ──▶ step(submit) ─┐
//!   ▲            │                         ├─▶ trajectory (reward, turns)
//!   │            └──▶ finish(max_turns) ───┤
//!   └──────────────── close / abort ───────┘
//! ```

mod metrics;
mod observation;
mod task;
mod trajectory;

use std::path::PathBuf;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

pub use metrics::{summarize, MetricsSummary, Tally};
pub use observation::{
    count_tokens, truncate_observation, ErrorClass, Observation, DEFAULT_TRUNCATION_CAP, TRUNCATION_MARKER,
};
pub use task::TaskInstance;
pub use trajectory::{ActionKind, EpisodeTrajectory, TerminatedBy, Turn};

use crate::backend::BackendError;
use crate::scoring::RewardBreakdown;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Debug, thiserror::Error)]
pub enum EnvError {
    #[error("task index {index} out of range for a dataset of {len}")]
    Bounds { index: usize, len: usize },
    #[error("{0}")]
    Lifecycle(String),
    #[error("infrastructure error: {0}")]
    Infrastructure(#[from] BackendError),
    #[error("evaluation failed: {0}")]
    Evaluation(String),
    #[error("preprocess failed: {0}")]
    Preprocess(String),
    #[error("{0}")]
    Argument(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// What an environment reports for one executed action.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Execution {
    /// Full (untruncated) feedback text.
    pub text: String,
    pub exit_status: Option<i64>,
    pub admissible: bool,
    pub error_class: ErrorClass,
    /// Environment-specific details surfaced in the step info.
    pub info: Map<String, Value>,
}

impl Execution {
    pub fn ok(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            exit_status: Some(0),
            admissible: true,
            ..Self::default()
        }
    }

    pub fn failed(text: impl Into<String>, class: ErrorClass) -> Self {
        Self {
            text: text.into(),
            admissible: false,
            error_class: class,
            ..Self::default()
        }
    }
}

/// Result of scoring a submission.
#[derive(Debug, Clone, PartialEq)]
pub struct Submission {
    /// Set when the submit action carried code that the environment ran.
    pub execution: Option<Execution>,
    pub breakdown: RewardBreakdown,
}

/// How an oracle replays a task's gold answer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GoldPlan {
    pub actions: Vec<String>,
    /// Payload for the final submit (a flag, say); bare submit when `None`.
    pub submit: Option<String>,
}

/// Per-environment hooks driven by [`EnvHandle`].
pub trait Environment: Send {
    fn name(&self) -> &str;

    /// Restore the initial state for `task`, including the environment's own
    /// per-task preprocessing.
    fn reset(&mut self, task: &TaskInstance) -> Result<(), EnvError>;

    /// Run one code action. Execution failures are reported inside the
    /// returned [`Execution`]; `Err` is reserved for infrastructure trouble.
    fn execute(&mut self, code: &str, timeout: Duration) -> Result<Execution, EnvError>;

    /// Score the episode. `payload` is the code or answer carried by the
    /// submit action, if any.
    fn submit(&mut self, task: &TaskInstance, payload: Option<&str>, timeout: Duration) -> Result<Submission, EnvError>;

    /// Score the current state without ending the episode, where supported.
    fn interim_reward(&mut self, _task: &TaskInstance, _timeout: Duration) -> Result<Option<RewardBreakdown>, EnvError> {
        Ok(None)
    }

    /// Reject tasks this environment cannot run safely.
    fn validate_task(&self, _task: &TaskInstance) -> Result<(), String> {
        Ok(())
    }

    fn gold_plan(&self, task: &TaskInstance) -> GoldPlan {
        GoldPlan {
            actions: task
                .gold
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(str::to_string)
                .collect(),
            submit: None,
        }
    }

    fn config_snapshot(&self) -> Value {
        Value::Object(Map::new())
    }

    /// Release containers. Must tolerate repeated calls.
    fn close(&mut self) -> Result<(), EnvError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum Action {
    Code(String),
    Submit(Option<String>),
}

impl Action {
    pub fn code(s: impl Into<String>) -> Self {
        Action::Code(s.into())
    }

    pub fn submit() -> Self {
        Action::Submit(None)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub admissible: bool,
    pub turn: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reward_breakdown: Option<RewardBreakdown>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub terminated_by: Option<TerminatedBy>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub observation: Observation,
    pub reward: Option<f64>,
    pub done: bool,
    pub info: StepInfo,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub timeout: Duration,
    pub truncation_cap: usize,
    pub traj_dir: Option<PathBuf>,
    /// Force termination (scored as a bare submit) after this many turns.
    pub max_turns: Option<usize>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            timeout: DEFAULT_TIMEOUT,
            truncation_cap: DEFAULT_TRUNCATION_CAP,
            traj_dir: None,
            max_turns: None,
        }
    }
}

pub type PreprocessHook = Box<dyn FnMut(&TaskInstance, &mut dyn Environment) -> Result<(), String> + Send>;

struct Active {
    task: TaskInstance,
    turns: Vec<Turn>,
    started: Instant,
}

/// One environment session: a dataset, an [`Environment`] and at most one
/// live episode.
pub struct EnvHandle {
    env: Box<dyn Environment>,
    tasks: Vec<TaskInstance>,
    config: EngineConfig,
    cursor: usize,
    hook: Option<PreprocessHook>,
    active: Option<Active>,
    last: Option<EpisodeTrajectory>,
    last_path: Option<PathBuf>,
    closed: bool,
}

impl EnvHandle {
    pub fn new(env: Box<dyn Environment>, tasks: Vec<TaskInstance>, config: EngineConfig) -> Result<Self, EnvError> {
        if tasks.is_empty() {
            return Err(EnvError::Argument("dataset is empty".into()));
        }
        for t in &tasks {
            env.validate_task(t)
                .map_err(|e| EnvError::Argument(format!("task {}: {e}", t.id)))?;
        }
        Ok(Self {
            env,
            tasks,
            config,
            cursor: 0,
            hook: None,
            active: None,
            last: None,
            last_path: None,
            closed: false,
        })
    }

    pub fn with_preprocess(mut self, hook: PreprocessHook) -> Self {
        self.hook = Some(hook);
        self
    }

    pub fn env_name(&self) -> &str {
        self.env.name()
    }

    pub fn tasks(&self) -> &[TaskInstance] {
        &self.tasks
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn environment(&self) -> &dyn Environment {
        self.env.as_ref()
    }

    pub fn current_task(&self) -> Option<&TaskInstance> {
        self.active.as_ref().map(|a| &a.task)
    }

    pub fn turn_count(&self) -> usize {
        self.active.as_ref().map_or(0, |a| a.turns.len())
    }

    /// Turns of the live episode, or of the last finished one.
    pub fn turns(&self) -> &[Turn] {
        match (&self.active, &self.last) {
            (Some(a), _) => &a.turns,
            (None, Some(t)) => &t.turns,
            (None, None) => &[],
        }
    }

    pub fn is_active(&self) -> bool {
        self.active.is_some()
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    /// Trajectory of the most recently finished episode.
    pub fn last_trajectory(&self) -> Option<&EpisodeTrajectory> {
        self.last.as_ref()
    }

    pub fn last_trajectory_path(&self) -> Option<&PathBuf> {
        self.last_path.as_ref()
    }

    pub fn gold_plan(&self) -> Option<GoldPlan> {
        self.current_task().map(|t| self.env.gold_plan(t))
    }

    /// Start an episode on task `index`, or on the next task in order.
    /// An episode still in progress is recorded as aborted first.
    pub fn reset(&mut self, index: Option<usize>) -> Result<(Observation, TaskInstance), EnvError> {
        self.check_open()?;
        if self.active.is_some() {
            self.finish(TerminatedBy::Abort)?;
        }
        let len = self.tasks.len();
        let index = match index {
            Some(i) if i >= len => return Err(EnvError::Bounds { index: i, len }),
            Some(i) => i,
            None => self.cursor,
        };
        self.cursor = (index + 1) % len;
        let task = self.tasks[index].clone();
        self.last = None;
        self.last_path = None;

        self.env.reset(&task)?;
        let started = Instant::now();
        if let Some(hook) = self.hook.as_mut() {
            if let Err(e) = hook(&task, self.env.as_mut()) {
                self.active = Some(Active {
                    task,
                    turns: Vec::new(),
                    started,
                });
                self.finish(TerminatedBy::Abort)?;
                return Err(EnvError::Preprocess(e));
            }
        }
        let observation = Observation::text(task.query.clone());
        self.active = Some(Active {
            task: task.clone(),
            turns: Vec::new(),
            started,
        });
        Ok((observation, task))
    }

    pub fn step(&mut self, action: Action) -> Result<StepOutcome, EnvError> {
        self.check_open()?;
        let Some(active) = self.active.as_ref() else {
            return Err(EnvError::Lifecycle("no active episode; call reset first".into()));
        };
        let task = active.task.clone();
        let i = active.turns.len();
        let started = Instant::now();
        match action {
            Action::Code(code) => {
                let exec = match self.env.execute(&code, self.config.timeout) {
                    Ok(e) => e,
                    Err(e) => {
                        self.abort_after_error();
                        return Err(e);
                    }
                };
                let observation = self.observe(&exec);
                self.push_turn(Turn {
                    i,
                    action_kind: ActionKind::Code,
                    action: code,
                    observation: observation.text.clone(),
                    admissible: exec.admissible,
                    exit_status: exec.exit_status,
                    error_class: exec.error_class,
                    latency: started.elapsed(),
                });
                let mut info = StepInfo {
                    admissible: exec.admissible,
                    turn: i,
                    reward_breakdown: None,
                    terminated_by: None,
                    extra: exec.info,
                };
                let (reward, done) = self.enforce_cap(i, &mut info)?;
                Ok(StepOutcome {
                    observation,
                    reward,
                    done,
                    info,
                })
            }
            Action::Submit(payload) => {
                let sub = match self.env.submit(&task, payload.as_deref(), self.config.timeout) {
                    Ok(s) => s,
                    Err(e) => {
                        self.abort_after_error();
                        return Err(e);
                    }
                };
                let (observation, admissible, extra) = match &sub.execution {
                    Some(exec) => (self.observe(exec), exec.admissible, exec.info.clone()),
                    None => (Observation::default(), true, Map::new()),
                };
                self.push_turn(Turn {
                    i,
                    action_kind: ActionKind::Submit,
                    action: payload.unwrap_or_default(),
                    observation: observation.text.clone(),
                    admissible,
                    exit_status: observation.exit_status,
                    error_class: observation.error_class,
                    latency: started.elapsed(),
                });
                let t = self.conclude(TerminatedBy::Submit, sub.breakdown)?;
                Ok(StepOutcome {
                    observation,
                    reward: t.reward,
                    done: true,
                    info: StepInfo {
                        admissible,
                        turn: i,
                        reward_breakdown: Some(t.reward_breakdown.clone()),
                        terminated_by: Some(TerminatedBy::Submit),
                        extra,
                    },
                })
            }
        }
    }

    /// Log a turn whose raw agent output could not be read as an action.
    /// Nothing runs; the turn is inadmissible and counts toward the cap.
    pub fn record_unparsed(&mut self, raw: &str, message: &str) -> Result<StepOutcome, EnvError> {
        self.check_open()?;
        let Some(active) = self.active.as_ref() else {
            return Err(EnvError::Lifecycle("no active episode; call reset first".into()));
        };
        let i = active.turns.len();
        let mut observation = truncate_observation(message, self.config.truncation_cap);
        observation.error_class = ErrorClass::ProtocolError;
        self.push_turn(Turn {
            i,
            action_kind: ActionKind::Code,
            action: raw.to_string(),
            observation: observation.text.clone(),
            admissible: false,
            exit_status: None,
            error_class: ErrorClass::ProtocolError,
            latency: Duration::ZERO,
        });
        let mut info = StepInfo {
            admissible: false,
            turn: i,
            reward_breakdown: None,
            terminated_by: None,
            extra: Map::new(),
        };
        let (reward, done) = self.enforce_cap(i, &mut info)?;
        Ok(StepOutcome {
            observation,
            reward,
            done,
            info,
        })
    }

    /// Change the turn cap; applies from the next step on.
    pub fn set_max_turns(&mut self, max_turns: Option<usize>) {
        self.config.max_turns = max_turns;
    }

    fn enforce_cap(&mut self, i: usize, info: &mut StepInfo) -> Result<(Option<f64>, bool), EnvError> {
        if !self.config.max_turns.is_some_and(|m| i + 1 >= m) {
            return Ok((None, false));
        }
        let t = self.finish(TerminatedBy::MaxTurns)?;
        info.reward_breakdown = Some(t.reward_breakdown.clone());
        info.terminated_by = Some(TerminatedBy::MaxTurns);
        Ok((t.reward, true))
    }

    /// Score the current state without ending the episode. `None` when the
    /// environment has no interim score.
    pub fn interim_reward(&mut self) -> Result<Option<f64>, EnvError> {
        self.check_open()?;
        let Some(active) = self.active.as_ref() else {
            return Err(EnvError::Lifecycle("no active episode".into()));
        };
        let task = active.task.clone();
        Ok(self
            .env
            .interim_reward(&task, self.config.timeout)?
            .and_then(|b| b.total()))
    }

    /// End the episode without a submit record. `MaxTurns` scores the state
    /// as a bare submit would; `Abort` leaves the reward absent.
    pub fn finish(&mut self, reason: TerminatedBy) -> Result<EpisodeTrajectory, EnvError> {
        let Some(active) = self.active.as_ref() else {
            return Err(EnvError::Lifecycle("no active episode".into()));
        };
        let breakdown = match reason {
            TerminatedBy::Abort => RewardBreakdown::None,
            TerminatedBy::Submit | TerminatedBy::MaxTurns => {
                let task = active.task.clone();
                match self.env.submit(&task, None, self.config.timeout) {
                    Ok(s) => s.breakdown,
                    Err(e) => {
                        self.abort_after_error();
                        return Err(e);
                    }
                }
            }
        };
        self.conclude(reason, breakdown)
    }

    /// Abort the live episode, if any, and release the environment.
    /// Repeated calls are no-ops.
    pub fn close(&mut self) -> Result<(), EnvError> {
        if self.closed {
            return Ok(());
        }
        if self.active.is_some() {
            if let Err(e) = self.conclude(TerminatedBy::Abort, RewardBreakdown::None) {
                log::warn!("saving aborted trajectory: {e}");
            }
        }
        self.closed = true;
        self.env.close()
    }

    fn check_open(&self) -> Result<(), EnvError> {
        if self.closed {
            Err(EnvError::Lifecycle("environment handle is closed".into()))
        } else {
            Ok(())
        }
    }

    fn observe(&self, exec: &Execution) -> Observation {
        let mut o = truncate_observation(&exec.text, self.config.truncation_cap);
        o.exit_status = exec.exit_status;
        o.error_class = exec.error_class;
        o
    }

    fn push_turn(&mut self, turn: Turn) {
        if let Some(a) = self.active.as_mut() {
            a.turns.push(turn);
        }
    }

    fn abort_after_error(&mut self) {
        if let Err(e) = self.conclude(TerminatedBy::Abort, RewardBreakdown::None) {
            log::warn!("saving aborted trajectory: {e}");
        }
    }

    fn conclude(&mut self, reason: TerminatedBy, breakdown: RewardBreakdown) -> Result<EpisodeTrajectory, EnvError> {
        let active = self
            .active
            .take()
            .ok_or_else(|| EnvError::Lifecycle("no active episode".into()))?;
        let reward = match reason {
            TerminatedBy::Abort => None,
            _ => Some(breakdown.total().unwrap_or(0.0).clamp(0.0, 1.0)),
        };
        let config_snapshot = json!({
            "env": self.env.config_snapshot(),
            "engine": {
                "timeout_secs": self.config.timeout.as_secs_f64(),
                "truncation_cap": self.config.truncation_cap,
                "tokenization": "whitespace",
                "max_turns": self.config.max_turns,
            },
            "extras": Value::Object(active.task.extras.clone()),
            "wall_time_secs": active.started.elapsed().as_secs_f64(),
        });
        let trajectory = EpisodeTrajectory {
            task_id: active.task.id,
            env: self.env.name().to_string(),
            query: active.task.query,
            gold: active.task.gold,
            turns: active.turns,
            reward,
            reward_breakdown: breakdown,
            terminated_by: reason,
            config_snapshot,
        };
        if let Some(dir) = &self.config.traj_dir {
            self.last_path = Some(trajectory.save(dir)?);
        }
        self.last = Some(trajectory.clone());
        Ok(trajectory)
    }
}

impl Drop for EnvHandle {
    fn drop(&mut self) {
        if let Err(e) = self.close() {
            log::warn!("closing environment: {e}");
        }
    }
}
