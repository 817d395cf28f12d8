//! Command-line entry points. Every subcommand resolves a [`RunConfig`]
//! from an optional TOML file, shorthand flags and `--set key.path=value`
//! overrides, in that order.

use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gatelab::buffers::BufferSet;
use gatelab::env::TaskId;
use gatelab::experts::{Arbitration, ExpertBundle};
use gatelab::oracle::{InterventionSource, OraclePolicy, ScriptedIntervention};
use gatelab::training::{
    collect_demos, evaluate, init_learner, learner_from_bundle, pretrain, save_checkpoint, train_online, EvalReport,
    Learner, NullObserver, Observer, OnlineOutcome, RunConfig, RunDir, EVAL_SEED_BASE,
};

use crate::session::Session;

#[derive(Debug, Parser)]
#[command(name = "labd", version, about = "Gated imitation/RL training runs and live intervention sessions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// Run configuration file (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Shorthand for `--set task=<TASK>`.
    #[arg(long, global = true)]
    pub task: Option<String>,
    /// Shorthand for `--set seed=<SEED>`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Dot-path override such as `lr.critic=1e-3`; repeatable.
    #[arg(long = "set", short = 's', value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Record noisy oracle demonstrations into a buffer directory.
    CollectDemos {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Offline pretraining on demonstrations; writes a checkpoint.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Demonstration directory; collected on the fly when omitted.
        #[arg(long)]
        demos: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Online fine-tuning with scripted interventions.
    TrainOnline {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        demos: Option<PathBuf>,
        /// Run directory for config, metrics, trajectories and checkpoints.
        #[arg(long)]
        run: PathBuf,
    },
    /// Deterministic evaluation of a checkpoint.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 20)]
        episodes: usize,
        #[arg(long, value_enum, default_value_t = Arbiter::Gate)]
        arbitration: Arbiter,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Full pipeline (demos, pretraining, online, evaluation) for one
    /// ablation arm, all other settings held from the config.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        variant: String,
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 50)]
        episodes: usize,
    },
    /// Online training driven by a live session; clients connect over
    /// WebSocket at `$LABD_LISTEN` (default 127.0.0.1:7878).
    Serve {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Pretrained checkpoint; pretrains from fresh demos when omitted.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        demos: Option<PathBuf>,
        #[arg(long)]
        run: PathBuf,
        /// Delay after each streamed step, in milliseconds.
        #[arg(long, default_value_t = 50)]
        tick_ms: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Arbiter {
    Gate,
    Bc,
    Rl,
}

impl From<Arbiter> for Arbitration {
    fn from(a: Arbiter) -> Self {
        match a {
            Arbiter::Gate => Arbitration::Gate,
            Arbiter::Bc => Arbitration::AlwaysBc,
            Arbiter::Rl => Arbitration::AlwaysRl,
        }
    }
}

/// A failed command: bad input (exit 2) or a failure while running (exit 1).
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Run(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Run(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Run(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<gatelab::Error> for CliError {
    fn from(e: gatelab::Error) -> Self {
        match e {
            gatelab::Error::Config(m) => CliError::Usage(m),
            other => CliError::Run(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

impl ConfigArgs {
    pub fn resolve(&self) -> CliResult<RunConfig> {
        let base = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let mut overrides = Vec::new();
        if let Some(t) = &self.task {
            TaskId::parse(t)?;
            overrides.push(format!("task=\"{t}\""));
        }
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        overrides.extend(self.set.iter().cloned());
        Ok(base.with_overrides(&overrides)?)
    }
}

/// Loads a checkpoint, checking it against the configured task when the
/// task was given explicitly; otherwise the checkpoint's task is adopted.
pub fn load_for(cfg: &mut RunConfig, explicit_task: bool, dir: &Path) -> CliResult<ExpertBundle> {
    let (bundle, ckpt) = ExpertBundle::load(dir)?;
    let recorded = ckpt
        .meta("task")
        .ok_or_else(|| CliError::Usage(format!("checkpoint {} records no task", dir.display())))?;
    let recorded = TaskId::parse(recorded)?;
    if explicit_task && recorded != cfg.task {
        return Err(CliError::Usage(format!(
            "checkpoint {} was trained on {}, not {}",
            dir.display(),
            recorded.name(),
            cfg.task.name()
        )));
    }
    cfg.task = recorded;
    if bundle.spec.obs_dim != cfg.task.obs_dim() {
        return Err(CliError::Usage(format!("checkpoint {} has the wrong input width", dir.display())));
    }
    Ok(bundle)
}

fn explicit_task(args: &ConfigArgs) -> bool {
    args.task.is_some() || args.set.iter().any(|s| s.trim_start().starts_with("task=")) || args.config.is_some()
}

/// Demonstrations from `dir`, or freshly collected from the oracle.
pub fn demo_buffers(cfg: &RunConfig, dir: Option<&Path>) -> CliResult<BufferSet> {
    let obs = cfg.task.obs_dim();
    match dir {
        Some(d) => {
            let set = BufferSet::load(d)?;
            if set.obs_dim() != obs {
                return Err(CliError::Usage(format!(
                    "demos in {} have {} features, {} needs {obs}",
                    d.display(),
                    set.obs_dim(),
                    cfg.task.name()
                )));
            }
            Ok(set)
        }
        None => {
            let task = cfg.task_spec()?;
            let demos = collect_demos(&task, cfg.n_demos, cfg.demo_noise, cfg.seed)?;
            let mut set = BufferSet::with_capacity(obs, cfg.capacity);
            set.load_offline_demos(&demos)?;
            Ok(set)
        }
    }
}

pub fn pretrained(cfg: &RunConfig, buffers: &BufferSet) -> CliResult<Learner> {
    let mut learner = init_learner(cfg)?;
    pretrain(cfg, &mut learner, buffers, &mut NullObserver, None)?;
    Ok(learner)
}

pub fn scripted_source(cfg: &RunConfig) -> CliResult<ScriptedIntervention> {
    let task = cfg.task_spec()?;
    Ok(ScriptedIntervention::new(cfg.intervention, OraclePolicy::compile(&task, 0.0)?, cfg.seed))
}

/// Online stage writing into `run`, finishing with `checkpoints/final`.
pub fn online(
    cfg: &RunConfig,
    learner: &mut Learner,
    buffers: &mut BufferSet,
    source: Box<dyn InterventionSource>,
    observer: &mut dyn Observer,
    run: &Path,
) -> CliResult<OnlineOutcome> {
    let mut dir = RunDir::create(run, cfg)?;
    let out = train_online(cfg, learner, buffers, source, observer, Some(&mut dir))?;
    let episodes = out.episodes.len() as u64;
    save_checkpoint(&learner.bundle, &dir.checkpoint_dir("final"), cfg, learner.updates, episodes)?;
    buffers.save(&run.join("buffers"))?;
    Ok(out)
}

pub fn print_report(r: &EvalReport, json: bool) {
    if json {
        println!("{}", serde_json::to_string_pretty(r).expect("report serializes"));
        return;
    }
    println!("episodes: {}", r.episodes);
    println!("success_rate: {:.4}", r.success_rate);
    println!("mean_length: {:.2}", r.mean_length);
    println!("rl_ratio: {:.4}", r.rl_ratio);
    let s = &r.switch_stats;
    println!(
        "switch_stats: switch {} steps mean {:.5} sd {:.5}; steady {} steps mean {:.5} sd {:.5}; ratio {}",
        s.switch_count,
        s.switch_mean,
        s.switch_std,
        s.steady_count,
        s.steady_mean,
        s.steady_std,
        s.ratio().map_or("n/a".to_string(), |v| format!("{v:.4}"))
    );
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::CollectDemos { cfg, out } => {
            let cfg = cfg.resolve()?;
            let set = demo_buffers(&cfg, None)?;
            set.save(&out)?;
            println!("{} demonstrations ({} transitions) -> {}", set.demo.episodes(), set.demo.len(), out.display());
        }
        Command::Pretrain { cfg, demos, out } => {
            let cfg = cfg.resolve()?;
            let buffers = demo_buffers(&cfg, demos.as_deref())?;
            let learner = pretrained(&cfg, &buffers)?;
            save_checkpoint(&learner.bundle, &out, &cfg, learner.updates, 0)?;
            println!("pretrained {} for {} iterations -> {}", cfg.task.name(), cfg.n_offline, out.display());
        }
        Command::TrainOnline { cfg: args, ckpt, demos, run } => {
            let mut cfg = args.resolve()?;
            let bundle = load_for(&mut cfg, explicit_task(&args), &ckpt)?;
            let mut buffers = demo_buffers(&cfg, demos.as_deref())?;
            let mut learner = learner_from_bundle(&cfg, bundle)?;
            let source = scripted_source(&cfg)?;
            let out = online(&cfg, &mut learner, &mut buffers, Box::new(source), &mut NullObserver, &run)?;
            summarize(&out);
        }
        Command::Eval {
            cfg: args,
            ckpt,
            episodes,
            arbitration,
            json,
        } => {
            let mut cfg = args.resolve()?;
            let bundle = load_for(&mut cfg, explicit_task(&args), &ckpt)?;
            let task = cfg.task_spec()?;
            let report = evaluate(&bundle, &task, episodes, EVAL_SEED_BASE + cfg.seed, arbitration.into())?;
            print_report(&report, json);
        }
        Command::Ablate {
            cfg,
            variant,
            run,
            episodes,
        } => {
            let mut cfg = cfg.resolve()?;
            cfg.ablation = gatelab::training::Ablation::variant(&variant)?;
            cfg.validate()?;
            let mut buffers = demo_buffers(&cfg, None)?;
            let mut learner = pretrained(&cfg, &buffers)?;
            let source = scripted_source(&cfg)?;
            let out = online(&cfg, &mut learner, &mut buffers, Box::new(source), &mut NullObserver, &run)?;
            summarize(&out);
            let task = cfg.task_spec()?;
            let report = evaluate(&learner.bundle, &task, episodes, EVAL_SEED_BASE + cfg.seed, cfg.arbitration())?;
            std::fs::write(run.join("eval.json"), serde_json::to_string_pretty(&report).expect("report serializes"))?;
            println!("variant: {variant}");
            print_report(&report, false);
        }
        Command::Serve {
            cfg: args,
            ckpt,
            demos,
            run,
            tick_ms,
        } => {
            let mut cfg = args.resolve()?;
            let bundle = match &ckpt {
                Some(dir) => Some(load_for(&mut cfg, explicit_task(&args), dir)?),
                None => None,
            };
            let mut buffers = demo_buffers(&cfg, demos.as_deref())?;
            let mut learner = match bundle {
                Some(b) => learner_from_bundle(&cfg, b)?,
                None => pretrained(&cfg, &buffers)?,
            };
            let session = Session::bind_from_env().map_err(|e| CliError::Usage(format!("cannot listen: {e}")))?;
            eprintln!("session listening on ws://{}", session.local_addr());
            let mut observer = session.observer(Duration::from_millis(tick_ms));
            let out = online(&cfg, &mut learner, &mut buffers, Box::new(session.source()), &mut observer, &run)?;
            summarize(&out);
            session.shutdown();
        }
    }
    Ok(())
}

fn summarize(out: &OnlineOutcome) {
    if let Some(last) = out.episodes.last() {
        let wins = out.episodes.iter().filter(|e| e.success).count();
        println!(
            "online: {} episodes, {wins} successful, demo ratio {:.2}%, auto-success ratio {:.2}%",
            out.episodes.len(),
            last.demo_ratio,
            last.auto_success_ratio
        );
    }
}
