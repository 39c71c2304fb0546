use std::path::PathBuf;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use execbench::backend;
use execbench::dataset::validate_gold;
use execbench::envs::{self, EnvOptions};
use execbench::episode::{summarize, EngineConfig, EnvHandle, Environment};
use execbench::harness::client::{ModelClient, ModelClientConfig, ModelPolicy};
use execbench::harness::human::human_repl;
use execbench::harness::report::report;
use execbench::harness::{run_dataset, OraclePolicy, Policy, StrategyConfig, StrategyKind};
use execbench::service::{Server, ServiceConfig};

#[derive(Parser)]
#[command(name = "execbench", version, about = "Interactive coding environments and agent evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a policy over a dataset.
    Run(RunArgs),
    /// Replay every task's gold answer and check it scores 1.
    Validate(ValidateArgs),
    /// Play one task from the terminal.
    Human(HumanArgs),
    /// Summarize a directory of trajectories.
    Report(ReportArgs),
    /// Serve environments over TCP.
    Serve(ServeArgs),
}

#[derive(Args)]
struct EnvArgs {
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(envs::NAMES))]
    env: String,
    /// Dataset file (or, for ctf, a directory of task bundles).
    #[arg(long)]
    dataset: PathBuf,
    /// docker, local, or auto.
    #[arg(long, default_value = "auto")]
    backend: String,
    /// JSON file with environment options.
    #[arg(long)]
    env_config: Option<PathBuf>,
    /// Per-action timeout in seconds.
    #[arg(long, default_value_t = 60.0)]
    timeout: f64,
}

impl EnvArgs {
    fn options(&self) -> Result<EnvOptions> {
        match &self.env_config {
            None => Ok(EnvOptions::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                let v: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
                Ok(EnvOptions::from_value(&v)?)
            }
        }
    }

    fn factory(&self) -> Result<impl Fn() -> Result<Box<dyn Environment>, execbench::episode::EnvError> + Sync> {
        let backend = backend::from_name(&self.backend)?;
        let options = self.options()?;
        let name = self.env.clone();
        Ok(move || envs::open(&name, backend.clone(), &options))
    }

    fn engine(&self, traj_dir: Option<PathBuf>) -> Result<EngineConfig> {
        if !(self.timeout.is_finite() && self.timeout > 0.0) {
            bail!("--timeout must be positive");
        }
        Ok(EngineConfig {
            timeout: Duration::from_secs_f64(self.timeout),
            traj_dir,
            ..EngineConfig::default()
        })
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyKind {
    Model,
    Oracle,
    Human,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    env: EnvArgs,
    #[arg(long, default_value = "try_again")]
    strategy: StrategyKind,
    #[arg(long, value_enum, default_value = "oracle")]
    policy: PolicyKind,
    #[arg(long)]
    max_turns: Option<usize>,
    #[arg(long)]
    traj_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// JSON file with chat-model client settings.
    #[arg(long)]
    model_config: Option<PathBuf>,
    #[arg(long)]
    base_url: Option<String>,
    #[arg(long)]
    model: Option<String>,
    /// Environment variable holding the API key.
    #[arg(long)]
    api_key_env: Option<String>,
}

#[derive(Args)]
struct ValidateArgs {
    #[command(flatten)]
    env: EnvArgs,
    #[arg(long, default_value_t = 4)]
    workers: usize,
}

#[derive(Args)]
struct HumanArgs {
    #[command(flatten)]
    env: EnvArgs,
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long, default_value_t = 10)]
    max_turns: usize,
    #[arg(long)]
    traj_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    dir: PathBuf,
    #[arg(long)]
    group_by: Option<String>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value_t = 7878)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value = "auto")]
    backend: String,
    #[arg(long, default_value_t = execbench::service::DEFAULT_MAX_SESSIONS)]
    max_sessions: usize,
    #[arg(long, default_value_t = 600)]
    idle_timeout_secs: u64,
    #[arg(long)]
    traj_dir: Option<PathBuf>,
}

fn model_config(args: &RunArgs) -> Result<ModelClientConfig> {
    let mut cfg = match &args.model_config {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => ModelClientConfig::default(),
    };
    if let Some(u) = &args.base_url {
        cfg.base_url = u.clone();
    }
    if let Some(m) = &args.model {
        cfg.model_name = m.clone();
    }
    if let Some(k) = &args.api_key_env {
        cfg.api_key_env_var = Some(k.clone());
    }
    Ok(cfg)
}

fn run(args: RunArgs) -> Result<()> {
    let tasks = envs::load_tasks(&args.env.env, &args.env.dataset)?;
    let engine = args.env.engine(args.traj_dir.clone())?;
    if matches!(args.policy, PolicyKind::Human) || args.strategy == StrategyKind::Human {
        bail!("interactive play uses the `human` subcommand");
    }
    let mut strategy = StrategyConfig::new(args.strategy, &args.env.env);
    if let Some(n) = args.max_turns {
        strategy.max_turns = n;
    }
    strategy.validate().map_err(anyhow::Error::msg)?;
    let factory = args.env.factory()?;
    let outcomes = match args.policy {
        PolicyKind::Oracle => run_dataset(factory, || Box::new(OraclePolicy::new()) as Box<dyn Policy>, &tasks, &strategy, &engine, args.workers)?,
        PolicyKind::Model => {
            let cfg = model_config(&args)?;
            cfg.validate().map_err(anyhow::Error::msg)?;
            let policy = || Box::new(ModelPolicy::new(ModelClient::new(cfg.clone()).expect("validated"))) as Box<dyn Policy>;
            run_dataset(factory, policy, &tasks, &strategy, &engine, args.workers)?
        }
        PolicyKind::Human => unreachable!(),
    };
    let mut done = Vec::new();
    for o in outcomes {
        match o.result {
            Ok(t) => {
                println!("{:<20} reward={:<6} turns={:<3} {:?}", o.task_id, t.reward.map_or("-".into(), |r| format!("{r:.3}")), t.turns.len(), t.terminated_by);
                done.push(t);
            }
            Err(e) => println!("{:<20} error: {e}", o.task_id),
        }
    }
    if let Ok(m) = summarize(&done) {
        println!(
            "episodes={} SR={:.1}% Error={:.1}% mean_turns={:.2}",
            m.episode_count,
            m.success_rate * 100.0,
            m.error_pct,
            m.mean_turns
        );
    }
    if done.len() < tasks.len() {
        bail!("{} of {} episodes failed to run", tasks.len() - done.len(), tasks.len());
    }
    Ok(())
}

fn validate(args: ValidateArgs) -> Result<()> {
    let tasks = envs::load_tasks(&args.env.env, &args.env.dataset)?;
    let engine = args.env.engine(None)?;
    let report = validate_gold(args.env.factory()?, &tasks, &engine, args.workers)?;
    let failures: Vec<_> = report.failures().collect();
    for f in &failures {
        println!("FAIL {} (#{}): reward={:?} admissible={} {}", f.id, f.index, f.reward, f.admissible, f.error.as_deref().unwrap_or(""));
    }
    println!("{}/{} tasks validated", tasks.len() - failures.len(), tasks.len());
    if !failures.is_empty() {
        bail!("gold validation failed");
    }
    Ok(())
}

fn human(args: HumanArgs) -> Result<()> {
    let tasks = envs::load_tasks(&args.env.env, &args.env.dataset)?;
    let engine = args.env.engine(args.traj_dir.clone())?;
    let env = (args.env.factory()?)()?;
    let mut handle = EnvHandle::new(env, tasks, engine)?;
    let stdin = std::io::stdin();
    let t = human_repl(&mut handle, Some(args.index), args.max_turns, stdin.lock(), std::io::stdout())?;
    if let Some(p) = handle.last_trajectory_path() {
        println!("trajectory: {}", p.display());
    }
    log::info!("episode ended: {:?}", t.terminated_by);
    Ok(())
}

fn show_report(args: ReportArgs) -> Result<()> {
    let r = report(&args.dir, args.group_by.as_deref())?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&r.to_json())?);
    } else {
        print!("{}", r.render_text());
    }
    Ok(())
}

fn serve(args: ServeArgs) -> Result<()> {
    let mut cfg = ServiceConfig::new(backend::from_name(&args.backend)?);
    cfg.max_sessions = args.max_sessions;
    cfg.idle_timeout = Duration::from_secs(args.idle_timeout_secs);
    cfg.traj_dir = args.traj_dir;
    let server = Server::bind((args.host.as_str(), args.port), cfg)?;
    eprintln!("listening on {}", server.local_addr()?);
    server.serve()?;
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Run(a) => run(a),
        Command::Validate(a) => validate(a),
        Command::Human(a) => human(a),
        Command::Report(a) => show_report(a),
        Command::Serve(a) => serve(a),
    }
}
