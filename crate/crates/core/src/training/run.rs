use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::learner::{Learner, StepLosses};
use super::rollout::{policy_action, ActMode, Episode, StepRecord};
use super::{RunConfig, Schedule};
use crate::buffers::{BufferSet, Source, Transition};
use crate::env::{self, TaskSpec};
use crate::error::{Error, Result};
use crate::experts::{BundleSpec, ExpertBundle};
use crate::oracle::{InterventionSource, OraclePolicy};

/// Seed offsets that keep demo, training and evaluation resets apart.
pub const DEMO_SEED_BASE: u64 = 1 << 40;
pub const TRAIN_SEED_BASE: u64 = 2 << 40;
pub const EVAL_SEED_BASE: u64 = 3 << 40;

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricsRecord {
    Update {
        phase: Phase,
        step: u64,
        #[serde(flatten)]
        losses: StepLosses,
        wall_clock: f64,
    },
    Episode(EpisodeMetrics),
}

impl MetricsRecord {
    /// The record with its wall-clock field zeroed, for run comparisons.
    pub fn without_wall_clock(&self) -> Self {
        let mut r = self.clone();
        match &mut r {
            MetricsRecord::Update { wall_clock, .. } => *wall_clock = 0.0,
            MetricsRecord::Episode(e) => e.wall_clock = 0.0,
        }
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Offline,
    Online,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub episode: u64,
    pub seed: u64,
    pub success: bool,
    pub length: usize,
    pub interventions: usize,
    pub rl_selection_ratio: f64,
    pub demo_ratio: f64,
    pub auto_success_ratio: f64,
    pub updates: u64,
    pub skipped_updates: u64,
    pub alpha: f64,
    pub wall_clock: f64,
}

/// Hooks into a training run. All callbacks run on the learner's thread.
pub trait Observer {
    fn on_step(&mut self, _episode: u64, _record: &StepRecord) {}
    fn on_episode_end(&mut self, _metrics: &EpisodeMetrics) {}
    fn on_metrics(&mut self, _record: &MetricsRecord) {}
    /// Checked before every environment step; the learner keeps updating on
    /// buffered data while this holds.
    fn is_paused(&self) -> bool {
        false
    }
    fn should_stop(&self) -> bool {
        false
    }
}

pub struct NullObserver;

impl Observer for NullObserver {}

/// A run directory: config copy, metrics stream, checkpoints and
/// trajectory dumps.
pub struct RunDir {
    root: PathBuf,
    metrics: BufWriter<File>,
    trajectories: BufWriter<File>,
}

#[derive(Serialize)]
struct TrajectoryLine<'a> {
    episode: u64,
    #[serde(flatten)]
    step: &'a StepRecord,
}

impl RunDir {
    pub fn create(root: &Path, cfg: &RunConfig) -> Result<Self> {
        fs::create_dir_all(root.join("checkpoints"))?;
        fs::write(root.join("config.toml"), cfg.to_toml())?;
        let open = |name: &str| -> Result<BufWriter<File>> { Ok(BufWriter::new(File::create(root.join(name))?)) };
        Ok(Self {
            root: root.to_path_buf(),
            metrics: open("metrics.jsonl")?,
            trajectories: open("trajectories.jsonl")?,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn checkpoint_dir(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(name)
    }

    pub fn write_metrics(&mut self, r: &MetricsRecord) -> Result<()> {
        serde_json::to_writer(&mut self.metrics, r)?;
        self.metrics.write_all(b"\n")?;
        Ok(())
    }

    pub fn write_step(&mut self, episode: u64, step: &StepRecord) -> Result<()> {
        serde_json::to_writer(&mut self.trajectories, &TrajectoryLine { episode, step })?;
        self.trajectories.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.metrics.flush()?;
        self.trajectories.flush()?;
        Ok(())
    }
}

/// Reads a metrics stream back.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Noisy oracle demonstrations, one successful episode each. Failed oracle
/// rollouts are skipped and the next seed is tried.
pub fn collect_demos(task: &TaskSpec, n: usize, noise: f32, seed: u64) -> Result<Vec<Vec<Transition>>> {
    let policy = OraclePolicy::compile(task, noise)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    let mut attempt = 0u64;
    while out.len() < n {
        if attempt >= 10 * n as u64 + 10 {
            return Err(Error::Config(format!(
                "oracle succeeded on only {} of {attempt} attempts",
                out.len()
            )));
        }
        let reset_seed = DEMO_SEED_BASE + seed.wrapping_mul(100_003) + attempt;
        attempt += 1;
        let mut state = env::reset(task, reset_seed);
        let mut obs = env::observe(&state, task);
        let mut ep = Vec::new();
        while !state.done {
            let a = policy.act(task, &state, &mut rng);
            let o = env::step(task, &state, a.arm, a.grip)?;
            let next = env::observe(&o.state, task);
            ep.push(Transition {
                state: std::mem::replace(&mut obs, next.clone()),
                arm_action: a.arm.delta.to_vec(),
                gripper_action: a.grip,
                reward: o.reward,
                next_state: next,
                done: o.done,
                intervened: false,
                source: Source::OfflineDemo,
            });
            state = o.state;
        }
        if state.succeeded {
            out.push(ep);
        }
    }
    Ok(out)
}

/// A fresh bundle and learner shaped by `cfg`.
pub fn init_learner(cfg: &RunConfig) -> Result<Learner> {
    cfg.validate()?;
    let spec = BundleSpec {
        obs_dim: cfg.task.obs_dim(),
        hidden: cfg.hidden.clone(),
        gate_hidden: cfg.gate_hidden.clone(),
    };
    let mut bundle = ExpertBundle::init(spec, cfg.seed, cfg.ablation.gripper_dqn)?;
    bundle.alpha_log = cfg.init_alpha.ln();
    Ok(Learner::new(bundle, cfg))
}

/// Wraps an existing bundle (for example one loaded from a checkpoint),
/// adding or dropping the gripper Q-network to match the ablation.
pub fn learner_from_bundle(cfg: &RunConfig, mut bundle: ExpertBundle) -> Result<Learner> {
    cfg.validate()?;
    if bundle.spec.obs_dim != cfg.task.obs_dim() {
        return Err(Error::Config(format!(
            "checkpoint expects {} observation features but {} has {}",
            bundle.spec.obs_dim,
            cfg.task.name(),
            cfg.task.obs_dim()
        )));
    }
    match (cfg.ablation.gripper_dqn, bundle.gripper_q.is_some()) {
        (true, false) => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9a1);
            let q = bundle.spec.gripper().init(&mut rng, 1.0)?;
            bundle.gripper_q = Some((q.clone(), q));
        }
        (false, true) => bundle.gripper_q = None,
        _ => {}
    }
    Ok(Learner::new(bundle, cfg))
}

fn clock(start: Instant) -> f64 {
    start.elapsed().as_secs_f64()
}

/// Stage one: `cfg.n_offline` iterations on the demonstrations.
pub fn pretrain(
    cfg: &RunConfig,
    learner: &mut Learner,
    buffers: &BufferSet,
    observer: &mut dyn Observer,
    mut run: Option<&mut RunDir>,
) -> Result<Vec<MetricsRecord>> {
    if buffers.demo.is_empty() {
        return Err(Error::Config("pretraining needs at least one demonstration episode".into()));
    }
    let start = Instant::now();
    let mut records = Vec::new();
    for i in 0..cfg.n_offline {
        let losses = learner.pretrain_step(buffers)?;
        if let Some(losses) = losses {
            if cfg.metrics_every > 0 && (i + 1) % cfg.metrics_every == 0 {
                let r = MetricsRecord::Update {
                    phase: Phase::Offline,
                    step: i as u64 + 1,
                    losses,
                    wall_clock: clock(start),
                };
                emit(&r, observer, run.as_deref_mut(), &mut records)?;
            }
        }
    }
    if let Some(run) = run {
        run.flush()?;
    }
    Ok(records)
}

fn emit(
    r: &MetricsRecord,
    observer: &mut dyn Observer,
    run: Option<&mut RunDir>,
    records: &mut Vec<MetricsRecord>,
) -> Result<()> {
    observer.on_metrics(r);
    if let Some(run) = run {
        run.write_metrics(r)?;
    }
    records.push(r.clone());
    Ok(())
}

/// What an online run produced.
#[derive(Debug, Clone, Default)]
pub struct OnlineOutcome {
    pub records: Vec<MetricsRecord>,
    pub episodes: Vec<EpisodeMetrics>,
    /// Checkpoints written during the run, oldest first.
    pub checkpoints: Vec<PathBuf>,
}

/// Shared bookkeeping for both schedules.
struct OnlineState<'a> {
    cfg: &'a RunConfig,
    start: Instant,
    outcome: OnlineOutcome,
    run: Option<&'a mut RunDir>,
}

impl OnlineState<'_> {
    fn update(&mut self, learner: &mut Learner, buffers: &BufferSet, observer: &mut dyn Observer) -> Result<()> {
        if let Some(losses) = learner.online_step(buffers)? {
            let every = self.cfg.metrics_every as u64;
            if every > 0 && learner.updates % every == 0 {
                let r = MetricsRecord::Update {
                    phase: Phase::Online,
                    step: learner.updates,
                    losses,
                    wall_clock: clock(self.start),
                };
                emit(&r, observer, self.run.as_deref_mut(), &mut self.outcome.records)?;
            }
        }
        Ok(())
    }

    fn step_seen(&mut self, episode: u64, rec: &StepRecord, observer: &mut dyn Observer) -> Result<()> {
        observer.on_step(episode, rec);
        if let Some(run) = self.run.as_deref_mut() {
            run.write_step(episode, rec)?;
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn episode_done(
        &mut self,
        episode: u64,
        seed: u64,
        transitions: &[Transition],
        summary: super::rollout::EpisodeSummary,
        learner: &Learner,
        buffers: &mut BufferSet,
        observer: &mut dyn Observer,
    ) -> Result<()> {
        buffers.ingest_episode(transitions)?;
        let (demo_ratio, auto_success_ratio) = buffers.ratios()?;
        let m = EpisodeMetrics {
            episode,
            seed,
            success: summary.success,
            length: summary.length,
            interventions: summary.interventions,
            rl_selection_ratio: summary.rl_selection_ratio,
            demo_ratio,
            auto_success_ratio,
            updates: learner.updates,
            skipped_updates: learner.skipped,
            alpha: (learner.bundle.alpha_log as f64).exp(),
            wall_clock: clock(self.start),
        };
        observer.on_episode_end(&m);
        emit(
            &MetricsRecord::Episode(m.clone()),
            observer,
            self.run.as_deref_mut(),
            &mut self.outcome.records,
        )?;
        self.outcome.episodes.push(m);
        let every = self.cfg.checkpoint_every as u64;
        if every > 0 && (episode + 1) % every == 0 {
            if let Some(run) = self.run.as_deref_mut() {
                let dir = run.checkpoint_dir(&format!("episode_{:05}", episode + 1));
                save_checkpoint(&learner.bundle, &dir, self.cfg, learner.updates, episode + 1)?;
                run.flush()?;
                self.outcome.checkpoints.push(dir);
            }
        }
        Ok(())
    }
}

/// Writes a bundle checkpoint tagged with the task and episode count.
pub fn save_checkpoint(bundle: &ExpertBundle, dir: &Path, cfg: &RunConfig, step: u64, episodes: u64) -> Result<()> {
    bundle.save(
        dir,
        step,
        &[
            ("task".to_string(), cfg.task.name().to_string()),
            ("episodes".to_string(), episodes.to_string()),
            ("gripper".to_string(), if cfg.ablation.gripper_dqn { "dqn" } else { "dbc" }.to_string()),
        ],
    )
}

/// Loads a checkpoint and checks that it was trained on `task`.
pub fn load_checkpoint(dir: &Path, task: crate::env::TaskId) -> Result<ExpertBundle> {
    let (bundle, ckpt) = ExpertBundle::load(dir)?;
    match ckpt.meta("task") {
        Some(t) if t == task.name() => Ok(bundle),
        Some(t) => Err(Error::Config(format!(
            "checkpoint {} was trained on {t}, not {}",
            dir.display(),
            task.name()
        ))),
        None => Err(Error::Checkpoint(format!("{} records no task", dir.display()))),
    }
}

pub fn train_seed(cfg: &RunConfig, episode: u64) -> u64 {
    TRAIN_SEED_BASE + cfg.seed.wrapping_mul(1_000_003) + episode
}

/// Stage two: online episodes with interventions, data routing and
/// `utd` updates per environment step.
pub fn train_online(
    cfg: &RunConfig,
    learner: &mut Learner,
    buffers: &mut BufferSet,
    source: Box<dyn InterventionSource>,
    observer: &mut dyn Observer,
    run: Option<&mut RunDir>,
) -> Result<OnlineOutcome> {
    let task = cfg.task_spec()?;
    let mut st = OnlineState {
        cfg,
        start: Instant::now(),
        outcome: OnlineOutcome::default(),
        run,
    };
    match cfg.schedule {
        Schedule::Interleaved => interleaved(cfg, &task, learner, buffers, source, observer, &mut st)?,
        Schedule::Threaded => threaded(cfg, &task, learner, buffers, source, observer, &mut st)?,
    }
    if let Some(run) = st.run.as_deref_mut() {
        run.flush()?;
    }
    Ok(st.outcome)
}

fn explore(cfg: &RunConfig) -> ActMode {
    ActMode::Explore {
        gripper_epsilon: cfg.dqn_epsilon,
    }
}

const PAUSE_POLL: Duration = Duration::from_millis(5);

fn interleaved(
    cfg: &RunConfig,
    task: &TaskSpec,
    learner: &mut Learner,
    buffers: &mut BufferSet,
    mut source: Box<dyn InterventionSource>,
    observer: &mut dyn Observer,
    st: &mut OnlineState<'_>,
) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xac70);
    let arbitration = cfg.arbitration();
    for e in 0..cfg.online_episodes as u64 {
        if observer.should_stop() {
            break;
        }
        let seed = train_seed(cfg, e);
        source.begin_episode(task, e);
        let mut ep = Episode::start(task, seed);
        while !ep.is_done() {
            while observer.is_paused() && !observer.should_stop() {
                st.update(learner, buffers, observer)?;
                std::thread::sleep(PAUSE_POLL);
            }
            let p = policy_action(&learner.bundle, ep.obs(), explore(cfg), arbitration, &mut rng)?;
            let rec = match source.decide(task, ep.state()) {
                Some((arm, grip)) => ep.advance(arm, grip, p.decision, true)?,
                None => ep.advance(p.arm, p.grip, p.decision, false)?,
            }
            .clone();
            st.step_seen(e, &rec, observer)?;
            for _ in 0..cfg.utd {
                st.update(learner, buffers, observer)?;
            }
        }
        let (transitions, _, summary) = ep.finish();
        st.episode_done(e, seed, &transitions, summary, learner, buffers, observer)?;
    }
    Ok(())
}

enum ActorMsg {
    Step(u64, Box<StepRecord>),
    EpisodeEnd {
        episode: u64,
        seed: u64,
        transitions: Vec<Transition>,
        summary: super::rollout::EpisodeSummary,
    },
    Failed(Error),
}

/// Actor thread stepping the environment against a parameter snapshot taken
/// at each episode start; the learner thread owns parameters and buffers.
fn threaded(
    cfg: &RunConfig,
    task: &TaskSpec,
    learner: &mut Learner,
    buffers: &mut BufferSet,
    mut source: Box<dyn InterventionSource>,
    observer: &mut dyn Observer,
    st: &mut OnlineState<'_>,
) -> Result<()> {
    let snapshot = Arc::new(Mutex::new(Arc::new(learner.bundle.clone())));
    let stop = Arc::new(std::sync::atomic::AtomicBool::new(false));
    let (tx, rx) = mpsc::sync_channel::<ActorMsg>(1024);
    let actor = {
        let snapshot = Arc::clone(&snapshot);
        let stop = Arc::clone(&stop);
        let cfg = cfg.clone();
        let task = task.clone();
        std::thread::spawn(move || {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xac70);
            let arbitration = cfg.arbitration();
            for e in 0..cfg.online_episodes as u64 {
                if stop.load(std::sync::atomic::Ordering::Relaxed) {
                    return;
                }
                let bundle = Arc::clone(&snapshot.lock().expect("snapshot lock"));
                let seed = train_seed(&cfg, e);
                source.begin_episode(&task, e);
                let mut ep = Episode::start(&task, seed);
                let result = (|| -> Result<()> {
                    while !ep.is_done() {
                        let p = policy_action(&bundle, ep.obs(), explore(&cfg), arbitration, &mut rng)?;
                        let rec = match source.decide(&task, ep.state()) {
                            Some((arm, grip)) => ep.advance(arm, grip, p.decision, true)?,
                            None => ep.advance(p.arm, p.grip, p.decision, false)?,
                        }
                        .clone();
                        if tx.send(ActorMsg::Step(e, Box::new(rec))).is_err() {
                            return Ok(());
                        }
                    }
                    Ok(())
                })();
                if let Err(err) = result {
                    let _ = tx.send(ActorMsg::Failed(err));
                    return;
                }
                let (transitions, _, summary) = ep.finish();
                let msg = ActorMsg::EpisodeEnd {
                    episode: e,
                    seed,
                    transitions,
                    summary,
                };
                if tx.send(msg).is_err() {
                    return;
                }
            }
        })
    };

    let mut result = Ok(());
    loop {
        if observer.should_stop() {
            stop.store(true, std::sync::atomic::Ordering::Relaxed);
            break;
        }
        match rx.recv_timeout(PAUSE_POLL) {
            Ok(ActorMsg::Step(e, rec)) => {
                if let Err(err) = st.step_seen(e, &rec, observer).and_then(|_| {
                    (0..cfg.utd).try_for_each(|_| st.update(learner, buffers, observer))
                }) {
                    result = Err(err);
                    break;
                }
            }
            Ok(ActorMsg::EpisodeEnd {
                episode,
                seed,
                transitions,
                summary,
            }) => {
                if let Err(err) = st.episode_done(episode, seed, &transitions, summary, learner, buffers, observer) {
                    result = Err(err);
                    break;
                }
                *snapshot.lock().expect("snapshot lock") = Arc::new(learner.bundle.clone());
            }
            Ok(ActorMsg::Failed(err)) => {
                result = Err(err);
                break;
            }
            Err(mpsc::RecvTimeoutError::Timeout) => {
                if observer.is_paused() {
                    if let Err(err) = st.update(learner, buffers, observer) {
                        result = Err(err);
                        break;
                    }
                }
            }
            Err(mpsc::RecvTimeoutError::Disconnected) => break,
        }
    }
    stop.store(true, std::sync::atomic::Ordering::Relaxed);
    drop(rx);
    actor
        .join()
        .map_err(|_| Error::Contract("actor thread panicked".into()))?;
    result
}
