//! Agent-side evaluation: policies, interaction strategies, prompt
//! templates, a chat-model client, a human REPL and reports.
//!
//! A strategy owns the conversation with a [`Policy`]; every action it
//! extracts goes through [`EnvHandle`], so trajectories look the same no
//! matter who produced them.
//!
//! | strategy            | ends on                                  | reward shown |
//! |---------------------|------------------------------------------|--------------|
//! | `single_turn`       | first action                             | no           |
//! | `try_again`         | interim reward 1, submit, or `max_turns` | yes          |
//! | `react`             | submit or `max_turns`                    | no           |
//! | `plan_solve`        | submit, plan exhausted, or `max_turns`   | no           |
//! | `plan_solve_refine` | as above, then up to 3 refine turns      | no           |

pub mod client;
pub mod human;
pub mod parse;
pub mod report;
pub mod templates;

use std::collections::{BTreeMap, VecDeque};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::envs::ctf;
use crate::episode::{
    Action, EngineConfig, EnvError, EnvHandle, Environment, EpisodeTrajectory, GoldPlan, StepOutcome, TaskInstance,
    TerminatedBy, Turn,
};
use parse::{parse_code_block, parse_plan, parse_react, parse_submit, ReactAction};
use templates::{render, EnvProfile, PromptTemplateSet};

pub const DEFAULT_MAX_TURNS: usize = 10;
pub const DEFAULT_REFINE_TURNS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    SingleTurn,
    TryAgain,
    React,
    PlanSolve,
    PlanSolveRefine,
    Human,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 6] = [
        StrategyKind::SingleTurn,
        StrategyKind::TryAgain,
        StrategyKind::React,
        StrategyKind::PlanSolve,
        StrategyKind::PlanSolveRefine,
        StrategyKind::Human,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::SingleTurn => "single_turn",
            StrategyKind::TryAgain => "try_again",
            StrategyKind::React => "react",
            StrategyKind::PlanSolve => "plan_solve",
            StrategyKind::PlanSolveRefine => "plan_solve_refine",
            StrategyKind::Human => "human",
        }
    }
}

impl FromStr for StrategyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s.replace('-', "_"))
            .ok_or_else(|| format!("unknown strategy {s:?}"))
    }
}

impl std::fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    pub max_turns: usize,
    pub templates: PromptTemplateSet,
    /// End the episode as soon as the interim reward reaches 1.
    pub terminate_on_reward: bool,
    /// Turns allowed after the plan runs out (refine strategy only).
    pub refine_turns: usize,
}

impl StrategyConfig {
    /// Defaults for `kind` in environment `env`.
    pub fn new(kind: StrategyKind, env: &str) -> Self {
        Self {
            kind,
            max_turns: if kind == StrategyKind::SingleTurn { 1 } else { DEFAULT_MAX_TURNS },
            templates: PromptTemplateSet::for_strategy(kind, env),
            terminate_on_reward: kind == StrategyKind::TryAgain,
            refine_turns: if kind == StrategyKind::PlanSolveRefine { DEFAULT_REFINE_TURNS } else { 0 },
        }
    }

    pub fn with_max_turns(mut self, n: usize) -> Self {
        self.max_turns = n;
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.max_turns == 0 {
            return Err("max_turns must be at least 1".into());
        }
        match self.kind {
            StrategyKind::SingleTurn if self.max_turns != 1 => {
                return Err("single_turn requires max_turns = 1".into());
            }
            StrategyKind::TryAgain if !self.terminate_on_reward => {
                return Err("try_again requires terminate_on_reward".into());
            }
            StrategyKind::React | StrategyKind::PlanSolve | StrategyKind::PlanSolveRefine if self.terminate_on_reward => {
                return Err(format!("{} must not terminate on interim reward", self.kind));
            }
            StrategyKind::PlanSolve | StrategyKind::PlanSolveRefine
                if self.templates.plan.is_none() || self.templates.execute_plan.is_none() =>
            {
                return Err(format!("{} needs plan and execute_plan templates", self.kind));
            }
            StrategyKind::PlanSolveRefine if self.templates.refine.is_none() => {
                return Err("plan_solve_refine needs a refine template".into());
            }
            _ => {}
        }
        self.templates.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(s: impl Into<String>) -> Self {
        Self { role: Role::System, content: s.into() }
    }

    pub fn user(s: impl Into<String>) -> Self {
        Self { role: Role::User, content: s.into() }
    }

    pub fn assistant(s: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: s.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Plan elicitation; not an environment turn.
    Plan,
    Act,
    Refine,
}

/// Everything a policy may look at when asked for its next reply.
pub struct TurnContext<'a> {
    pub strategy: StrategyKind,
    pub phase: Phase,
    /// Index of the turn this reply will become.
    pub turn: usize,
    pub query: &'a str,
    pub messages: &'a [Message],
    pub history: &'a [Turn],
}

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("model request failed: {0}")]
    Transport(String),
    #[error("policy gave up: {0}")]
    Quit(String),
}

/// The agent: turns a conversation into its next raw reply.
pub trait Policy: Send {
    /// Called once per episode before the first reply.
    fn begin(&mut self, _task: &TaskInstance, _gold: &GoldPlan) {}

    fn respond(&mut self, ctx: &TurnContext<'_>) -> Result<String, PolicyError>;
}

/// Run one episode on task `index` (or the next task) under `strategy`.
///
/// A policy failure aborts the episode and yields an abort trajectory; `Err`
/// is reserved for environment trouble.
pub fn run_episode(
    handle: &mut EnvHandle,
    index: Option<usize>,
    policy: &mut dyn Policy,
    strategy: &StrategyConfig,
) -> Result<EpisodeTrajectory, EnvError> {
    strategy.validate().map_err(EnvError::Argument)?;
    if strategy.kind == StrategyKind::Human {
        return Err(EnvError::Argument("the human strategy runs through human_repl".into()));
    }
    handle.set_max_turns(Some(strategy.max_turns));
    let env = handle.env_name().to_string();
    let (_, task) = handle.reset(index)?;
    let gold = handle.gold_plan().expect("active episode");
    policy.begin(&task, &gold);
    let mut run = Run {
        handle,
        policy,
        strategy,
        profile: EnvProfile::for_env(&env),
        env,
        task,
        messages: Vec::new(),
    };
    match run.drive() {
        Ok(t) => Ok(t),
        Err(Stop::Env(e)) => Err(e),
        Err(Stop::Policy(e)) => {
            log::warn!("task {}: {e}; aborting episode", run.task.id);
            run.handle.finish(TerminatedBy::Abort)
        }
    }
}

enum Stop {
    Env(EnvError),
    Policy(PolicyError),
}

impl From<EnvError> for Stop {
    fn from(e: EnvError) -> Self {
        Stop::Env(e)
    }
}

impl From<PolicyError> for Stop {
    fn from(e: PolicyError) -> Self {
        Stop::Policy(e)
    }
}

struct Run<'a> {
    handle: &'a mut EnvHandle,
    policy: &'a mut dyn Policy,
    strategy: &'a StrategyConfig,
    profile: EnvProfile,
    env: String,
    task: TaskInstance,
    messages: Vec<Message>,
}

impl Run<'_> {
    fn vars(&self) -> BTreeMap<&'static str, String> {
        BTreeMap::from([
            ("language", self.profile.language.clone()),
            ("fence", self.profile.fence.clone()),
            ("setting", self.profile.setting.clone()),
            ("query", self.task.query.clone()),
        ])
    }

    fn render(&self, template: &str, extra: &[(&'static str, String)]) -> Result<String, Stop> {
        let mut vars = self.vars();
        vars.extend(extra.iter().cloned());
        render(template, &vars).map_err(|e| Stop::Env(EnvError::Argument(format!("template: {e}"))))
    }

    fn ask(&mut self, phase: Phase) -> Result<String, Stop> {
        let ctx = TurnContext {
            strategy: self.strategy.kind,
            phase,
            turn: self.handle.turn_count(),
            query: &self.task.query,
            messages: &self.messages,
            history: self.handle.turns(),
        };
        let reply = self.policy.respond(&ctx)?;
        self.messages.push(Message::assistant(reply.clone()));
        Ok(reply)
    }

    /// Read a code-style reply and apply it.
    fn act_on_code(&mut self, reply: &str) -> Result<StepOutcome, Stop> {
        let code = parse_code_block(reply, &self.profile.fence);
        let out = if code.is_empty() {
            let reminder = self.render(&self.strategy.templates.format_reminder, &self.turn_vars())?;
            self.handle.record_unparsed(reply, &reminder)?
        } else {
            self.handle.step(self.code_action(&code))?
        };
        Ok(out)
    }

    fn code_action(&self, code: &str) -> Action {
        if self.env == "ctf" {
            return ctf::parse_action(code);
        }
        match parse_submit(code) {
            Some(payload) => Action::Submit(payload),
            None => Action::Code(code.to_string()),
        }
    }

    fn turn_vars(&self) -> Vec<(&'static str, String)> {
        vec![("turn", (self.handle.turn_count() + 1).to_string())]
    }

    fn finished(&self) -> EpisodeTrajectory {
        self.handle.last_trajectory().cloned().expect("finished episode")
    }

    fn drive(&mut self) -> Result<EpisodeTrajectory, Stop> {
        let t = &self.strategy.templates;
        let (initial, instruction) = (t.initial.clone(), t.instruction.clone());
        match self.strategy.kind {
            StrategyKind::PlanSolve | StrategyKind::PlanSolveRefine => self.plan_solve(),
            StrategyKind::React => {
                self.messages = vec![Message::system(self.render(&initial, &[])?), Message::user(self.render(&instruction, &[])?)];
                self.react()
            }
            _ => {
                self.messages = vec![Message::system(self.render(&initial, &[])?), Message::user(self.render(&instruction, &[])?)];
                let terminate = self.strategy.terminate_on_reward;
                self.code_loop(terminate, &self.strategy.templates.observation.clone())
            }
        }
    }

    /// Single turn and try again: one fenced action per reply.
    fn code_loop(&mut self, terminate_on_reward: bool, observation: &str) -> Result<EpisodeTrajectory, Stop> {
        loop {
            let reply = self.ask(Phase::Act)?;
            let out = self.act_on_code(&reply)?;
            if out.done {
                return Ok(self.finished());
            }
            let reward = if terminate_on_reward || observation.contains("{reward}") {
                self.handle.interim_reward()?
            } else {
                None
            };
            if terminate_on_reward && reward == Some(1.0) {
                return Ok(self.handle.finish(TerminatedBy::Submit)?);
            }
            let shown = reward.map_or_else(|| "N/A".to_string(), format_reward);
            let mut vars = self.turn_vars();
            vars.push(("observation", out.observation.text.clone()));
            vars.push(("reward", shown));
            let msg = self.render(observation, &vars)?;
            self.messages.push(Message::user(msg));
        }
    }

    fn react(&mut self) -> Result<EpisodeTrajectory, Stop> {
        loop {
            let turn_label = (self.handle.turn_count() + 1).to_string();
            let reply = self.ask(Phase::Act)?;
            let step = parse_react(&reply);
            let (out, msg) = match step.action {
                ReactAction::Execute(code) => {
                    let action = if self.env == "ctf" {
                        match ctf::parse_action(&code) {
                            Action::Code(c) => Action::Code(c),
                            // a flag goes through submit[...]
                            Action::Submit(_) => Action::Code(code),
                        }
                    } else {
                        Action::Code(code)
                    };
                    let out = self.handle.step(action)?;
                    let msg = self.render(
                        &self.strategy.templates.observation,
                        &[("turn", turn_label), ("observation", out.observation.text.clone())],
                    )?;
                    (out, msg)
                }
                ReactAction::Submit(payload) => (self.handle.step(Action::Submit(payload))?, String::new()),
                ReactAction::Invalid => {
                    let reminder = self.render(&self.strategy.templates.format_reminder, &[("turn", turn_label)])?;
                    (self.handle.record_unparsed(&reply, &reminder)?, reminder)
                }
            };
                if out.done {
                return Ok(self.finished());
            }
            self.messages.push(Message::user(msg));
        }
    }

    fn plan_solve(&mut self) -> Result<EpisodeTrajectory, Stop> {
        let t = self.strategy.templates.clone();
        let plan_template = t.plan.as_deref().expect("validated");
        self.messages = vec![Message::user(self.render(plan_template, &[])?)];
        let plan_reply = self.ask(Phase::Plan)?;
        let items = parse_plan(&plan_reply);
        let conversation = vec![Message::system(self.render(&t.initial, &[])?), Message::user(self.render(&t.instruction, &[])?)];
        if items.is_empty() {
            log::warn!("task {}: plan has no numbered steps; falling back to try_again", self.task.id);
            self.messages = conversation;
            let fallback = PromptTemplateSet::for_strategy(StrategyKind::TryAgain, &self.env);
            return self.code_loop(true, &fallback.observation);
        }
        self.messages = conversation;
        self.messages.push(Message::assistant(plan_reply));
        let execute = t.execute_plan.as_deref().expect("validated");
        self.messages.push(Message::user(self.render(execute, &[("step", items[0].clone())])?));
        let mut last_observation = String::new();
        for (k, item) in items.iter().enumerate() {
            if k > 0 {
                let msg = self.render(
                    &t.observation,
                    &[("observation", last_observation.clone()), ("step", item.clone()), ("turn", k.to_string())],
                )?;
                self.messages.push(Message::user(msg));
            }
            let reply = self.ask(Phase::Act)?;
            let out = self.act_on_code(&reply)?;
            if out.done {
                return Ok(self.finished());
            }
            last_observation = out.observation.text;
        }
        if let Some(refine) = t.refine.as_deref().filter(|_| self.strategy.refine_turns > 0) {
            if self.handle.interim_reward()? == Some(1.0) {
                return Ok(self.handle.finish(TerminatedBy::Submit)?);
            }
            self.messages.push(Message::user(self.render(refine, &[("observation", last_observation)])?));
            for _ in 0..self.strategy.refine_turns {
                let reply = self.ask(Phase::Refine)?;
                let out = self.act_on_code(&reply)?;
                if out.done {
                    return Ok(self.finished());
                }
                if self.handle.interim_reward()? == Some(1.0) {
                    return Ok(self.handle.finish(TerminatedBy::Submit)?);
                }
                let msg = self.render("Observation: {observation}", &[("observation", out.observation.text)])?;
                self.messages.push(Message::user(msg));
            }
        }
        Ok(self.handle.finish(TerminatedBy::MaxTurns)?)
    }
}

fn format_reward(r: f64) -> String {
    let s = format!("{r:.2}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

/// Replays the gold plan in whatever format the strategy expects.
#[derive(Debug, Default)]
pub struct OraclePolicy {
    actions: VecDeque<String>,
    plan: Vec<String>,
    submit: Option<String>,
}

impl OraclePolicy {
    pub fn new() -> Self {
        Self::default()
    }

    fn submit_line(&self) -> String {
        match &self.submit {
            Some(p) => format!("submit {p}"),
            None => "submit".into(),
        }
    }
}

fn fenced(code: &str) -> String {
    format!("```\n{code}\n```")
}

impl Policy for OraclePolicy {
    fn begin(&mut self, _task: &TaskInstance, gold: &GoldPlan) {
        self.actions = gold.actions.iter().cloned().collect();
        self.plan = gold.actions.clone();
        self.submit = gold.submit.clone();
    }

    fn respond(&mut self, ctx: &TurnContext<'_>) -> Result<String, PolicyError> {
        if ctx.phase == Phase::Plan {
            let mut lines: Vec<String> = self
                .plan
                .iter()
                .enumerate()
                .map(|(i, a)| format!("{}. Run: {}", i + 1, a.lines().next().unwrap_or("")))
                .collect();
            lines.push(format!("{}. Submit the answer.", lines.len() + 1));
            return Ok(lines.join("\n"));
        }
        let turn = ctx.turn + 1;
        Ok(match ctx.strategy {
            StrategyKind::SingleTurn => {
                if self.submit.is_some() || self.actions.is_empty() {
                    self.submit_line()
                } else {
                    let all: Vec<String> = self.actions.drain(..).collect();
                    fenced(&all.join("\n"))
                }
            }
            StrategyKind::React => match self.actions.pop_front() {
                Some(a) => format!("Thought {turn}: Next step of the known solution.\nAction {turn}: execute[{a}]"),
                None => match &self.submit {
                    Some(p) => format!("Thought {turn}: Done.\nAction {turn}: submit[{p}]"),
                    None => format!("Thought {turn}: Done.\nAction {turn}: submit"),
                },
            },
            _ => match self.actions.pop_front() {
                Some(a) => fenced(&a),
                None => self.submit_line(),
            },
        })
    }
}

/// A policy that replays fixed replies in order, then repeats the last one.
#[derive(Debug, Clone)]
pub struct ScriptedPolicy {
    replies: Vec<String>,
    next: usize,
    /// Number of `respond` calls so far, by phase.
    pub calls: Vec<Phase>,
}

impl ScriptedPolicy {
    pub fn new<S: Into<String>>(replies: impl IntoIterator<Item = S>) -> Self {
        Self {
            replies: replies.into_iter().map(Into::into).collect(),
            next: 0,
            calls: Vec::new(),
        }
    }

    pub fn act_calls(&self) -> usize {
        self.calls.iter().filter(|p| **p != Phase::Plan).count()
    }
}

impl Policy for ScriptedPolicy {
    fn begin(&mut self, _task: &TaskInstance, _gold: &GoldPlan) {
        self.next = 0;
        self.calls.clear();
    }

    fn respond(&mut self, ctx: &TurnContext<'_>) -> Result<String, PolicyError> {
        self.calls.push(ctx.phase);
        let reply = self
            .replies
            .get(self.next.min(self.replies.len().saturating_sub(1)))
            .cloned()
            .ok_or_else(|| PolicyError::Quit("empty script".into()))?;
        self.next += 1;
        Ok(reply)
    }
}

/// Result of one dataset episode.
#[derive(Debug)]
pub struct EpisodeOutcome {
    pub index: usize,
    pub task_id: String,
    pub result: Result<EpisodeTrajectory, EnvError>,
}

/// Run every task under `strategy` on a pool of `workers` threads, each with
/// its own environment and policy. Outcomes come back in task order.
pub fn run_dataset<F, P>(
    env_factory: F,
    policy_factory: P,
    tasks: &[TaskInstance],
    strategy: &StrategyConfig,
    engine: &EngineConfig,
    workers: usize,
) -> Result<Vec<EpisodeOutcome>, EnvError>
where
    F: Fn() -> Result<Box<dyn Environment>, EnvError> + Sync,
    P: Fn() -> Box<dyn Policy> + Sync,
{
    if tasks.is_empty() {
        return Err(EnvError::Argument("dataset is empty".into()));
    }
    strategy.validate().map_err(EnvError::Argument)?;
    let next = AtomicUsize::new(0);
    let results = Mutex::new(Vec::with_capacity(tasks.len()));
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, tasks.len()) {
            scope.spawn(|| {
                let mut policy = policy_factory();
                let mut handle: Option<EnvHandle> = None;
                loop {
                    let index = next.fetch_add(1, Ordering::SeqCst);
                    if index >= tasks.len() {
                        break;
                    }
                    if handle.is_none() {
                        match env_factory().and_then(|env| EnvHandle::new(env, tasks.to_vec(), engine.clone())) {
                            Ok(h) => handle = Some(h),
                            Err(e) => {
                                results.lock().unwrap().push(EpisodeOutcome {
                                    index,
                                    task_id: tasks[index].id.clone(),
                                    result: Err(e),
                                });
                                continue;
                            }
                        }
                    }
                    let h = handle.as_mut().expect("handle present");
                    let result = run_episode(h, Some(index), policy.as_mut(), strategy);
                    if result.is_err() {
                        handle = None;
                    }
                    results.lock().unwrap().push(EpisodeOutcome {
                        index,
                        task_id: tasks[index].id.clone(),
                        result,
                    });
                }
            });
        }
    });
    let mut out = results.into_inner().unwrap();
    out.sort_by_key(|o| o.index);
    Ok(out)
}
