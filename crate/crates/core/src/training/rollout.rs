use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::buffers::{Source, Transition};
use crate::env::{self, ArmAction, EnvState, GripperMode, TaskSpec, GRIPPER_MODES};
use crate::error::Result;
use crate::experts::{Arbitration, Expert, ExpertBundle, GateDecision};
use crate::oracle::InterventionSource;

/// How the policy acts during a rollout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ActMode {
    /// Modes everywhere; used for evaluation.
    Deterministic,
    /// The RL expert samples from its policy, the imitation expert acts at
    /// its mode, and a learned gripper Q-network (if any) is epsilon-greedy.
    Explore { gripper_epsilon: f32 },
}

/// The policy's choice at one state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyAction {
    pub arm: ArmAction,
    pub grip: GripperMode,
    pub decision: GateDecision,
}

/// Runs the gate, then the selected expert and the gripper head.
pub fn policy_action<R: Rng + ?Sized>(
    bundle: &ExpertBundle,
    obs: &[f32],
    mode: ActMode,
    arbitration: Arbitration,
    rng: &mut R,
) -> Result<PolicyAction> {
    let mut decision = bundle.gate_decision(obs)?;
    decision.selected = match arbitration {
        Arbitration::Gate => decision.selected,
        Arbitration::AlwaysBc => Expert::Bc,
        Arbitration::AlwaysRl => Expert::Rl,
    };
    let explore = matches!(mode, ActMode::Explore { .. });
    let arm = match decision.selected {
        Expert::Bc => bundle.bc_act(obs, false, rng)?.0,
        Expert::Rl => bundle.rl_act(obs, explore, rng)?.0,
    };
    let mut grip = bundle.gripper_act(obs)?;
    if let ActMode::Explore { gripper_epsilon } = mode {
        if bundle.gripper_q.is_some() && rng.random::<f32>() < gripper_epsilon {
            grip = GripperMode::from_index(rng.random_range(0..GRIPPER_MODES)).expect("valid index");
        }
    }
    Ok(PolicyAction {
        arm: ArmAction::from_slice(&arm),
        grip,
        decision,
    })
}

/// One executed step, as written to trajectory dumps and streamed to
/// session clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: u32,
    pub state: EnvState,
    pub arm: ArmAction,
    pub grip: GripperMode,
    pub reward: f32,
    pub done: bool,
    pub intervened: bool,
    /// Expert whose action ran; `None` when an intervention overrode it.
    pub expert: Option<Expert>,
    pub decision: GateDecision,
    /// End-effector displacement produced by this step.
    pub displacement: f32,
    /// The executing expert differs from the previous step's.
    pub switched: bool,
}

/// Per-episode summary.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub success: bool,
    pub length: usize,
    pub interventions: usize,
    /// Share of policy-controlled steps that ran the RL expert.
    pub rl_selection_ratio: f64,
}

/// An episode in progress. Stepped one action at a time so interactive
/// sessions can interleave control messages between steps.
pub struct Episode<'a> {
    task: &'a TaskSpec,
    state: EnvState,
    obs: Vec<f32>,
    transitions: Vec<Transition>,
    records: Vec<StepRecord>,
    last_expert: Option<Expert>,
}

impl<'a> Episode<'a> {
    pub fn start(task: &'a TaskSpec, seed: u64) -> Self {
        let state = env::reset(task, seed);
        let obs = env::observe(&state, task);
        Self {
            task,
            state,
            obs,
            transitions: Vec::new(),
            records: Vec::new(),
            last_expert: None,
        }
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn obs(&self) -> &[f32] {
        &self.obs
    }

    pub fn is_done(&self) -> bool {
        self.state.done
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    /// Executes one step. `intervened` marks an externally supplied action.
    pub fn advance(
        &mut self,
        arm: ArmAction,
        grip: GripperMode,
        decision: GateDecision,
        intervened: bool,
    ) -> Result<&StepRecord> {
        let out = env::step(self.task, &self.state, arm, grip)?;
        let next_obs = env::observe(&out.state, self.task);
        let expert = (!intervened).then_some(decision.selected);
        let switched = matches!((self.last_expert, expert), (Some(a), Some(b)) if a != b);
        if expert.is_some() {
            self.last_expert = expert;
        }
        self.transitions.push(Transition {
            state: std::mem::replace(&mut self.obs, next_obs.clone()),
            arm_action: arm.delta.to_vec(),
            gripper_action: grip,
            reward: out.reward,
            next_state: next_obs,
            done: out.done,
            intervened,
            source: if intervened {
                Source::OnlineIntervention
            } else {
                Source::OnlinePolicy
            },
        });
        self.records.push(StepRecord {
            t: self.state.step_index,
            displacement: env::displacement(&self.state, &out.state),
            state: out.state.clone(),
            arm,
            grip,
            reward: out.reward,
            done: out.done,
            intervened,
            expert,
            decision,
            switched,
        });
        self.state = out.state;
        Ok(self.records.last().expect("just pushed"))
    }

    pub fn summary(&self) -> EpisodeSummary {
        let interventions = self.records.iter().filter(|r| r.intervened).count();
        let policy_steps = self.records.len() - interventions;
        let rl = self.records.iter().filter(|r| r.expert == Some(Expert::Rl)).count();
        EpisodeSummary {
            success: self.state.succeeded,
            length: self.records.len(),
            interventions,
            rl_selection_ratio: if policy_steps == 0 {
                0.0
            } else {
                rl as f64 / policy_steps as f64
            },
        }
    }

    pub fn finish(self) -> (Vec<Transition>, Vec<StepRecord>, EpisodeSummary) {
        let s = self.summary();
        (self.transitions, self.records, s)
    }
}

/// Rolls out one full episode under an intervention source. `on_step` sees
/// every executed step.
#[allow(clippy::too_many_arguments)]
pub fn run_episode<R: Rng + ?Sized>(
    bundle: &ExpertBundle,
    task: &TaskSpec,
    seed: u64,
    episode_index: u64,
    mode: ActMode,
    arbitration: Arbitration,
    source: &mut dyn InterventionSource,
    rng: &mut R,
    on_step: &mut dyn FnMut(&StepRecord),
) -> Result<(Vec<Transition>, Vec<StepRecord>, EpisodeSummary)> {
    source.begin_episode(task, episode_index);
    let mut ep = Episode::start(task, seed);
    while !ep.is_done() {
        let p = policy_action(bundle, ep.obs(), mode, arbitration, rng)?;
        let rec = match source.decide(task, ep.state()) {
            Some((arm, grip)) => ep.advance(arm, grip, p.decision, true)?,
            None => ep.advance(p.arm, p.grip, p.decision, false)?,
        };
        on_step(rec);
    }
    Ok(ep.finish())
}

/// Displacement statistics split by whether the executing expert changed.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SwitchStats {
    pub switch_count: usize,
    pub switch_mean: f64,
    pub switch_std: f64,
    pub steady_count: usize,
    pub steady_mean: f64,
    pub steady_std: f64,
}

impl SwitchStats {
    pub fn from_records<'r>(records: impl IntoIterator<Item = &'r StepRecord>) -> Self {
        let (mut sw, mut st) = (Vec::new(), Vec::new());
        for r in records {
            if r.intervened {
                continue;
            }
            if r.switched { &mut sw } else { &mut st }.push(r.displacement as f64);
        }
        let (switch_mean, switch_std) = mean_std(&sw);
        let (steady_mean, steady_std) = mean_std(&st);
        Self {
            switch_count: sw.len(),
            switch_mean,
            switch_std,
            steady_count: st.len(),
            steady_mean,
            steady_std,
        }
    }

    /// Switch-step mean over steady-step mean; `None` without both kinds.
    pub fn ratio(&self) -> Option<f64> {
        (self.switch_count > 0 && self.steady_count > 0 && self.steady_mean > 0.0)
            .then(|| self.switch_mean / self.steady_mean)
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Result of deterministic evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: usize,
    pub success_rate: f64,
    pub mean_length: f64,
    pub rl_ratio: f64,
    pub switch_stats: SwitchStats,
    /// Gate and variance averages over policy-controlled steps.
    pub mean_w_bc: f64,
    pub mean_sigma_bc: f64,
    pub mean_sigma_rl: f64,
}

/// Deterministic rollouts on seeds `seed, seed + 1, ...` with no
/// interventions and no learning.
pub fn evaluate(
    bundle: &ExpertBundle,
    task: &TaskSpec,
    n_episodes: usize,
    seed: u64,
    arbitration: Arbitration,
) -> Result<EvalReport> {
    if n_episodes == 0 {
        return Err(crate::Error::Config("evaluation needs at least one episode".into()));
    }
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let mut none = crate::oracle::NoIntervention;
    let mut all = Vec::new();
    let (mut wins, mut len, mut rl) = (0usize, 0usize, 0.0f64);
    for i in 0..n_episodes {
        let (_, records, s) = run_episode(
            bundle,
            task,
            seed.wrapping_add(i as u64),
            i as u64,
            ActMode::Deterministic,
            arbitration,
            &mut none,
            &mut rng,
            &mut |_| {},
        )?;
        wins += s.success as usize;
        len += s.length;
        rl += s.rl_selection_ratio;
        all.extend(records);
    }
    let n = n_episodes as f64;
    let avg = |f: &dyn Fn(&GateDecision) -> f32| {
        all.iter().map(|r| f(&r.decision) as f64).sum::<f64>() / all.len().max(1) as f64
    };
    Ok(EvalReport {
        mean_w_bc: avg(&|d| d.w_bc),
        mean_sigma_bc: avg(&|d| d.sigma_bc),
        mean_sigma_rl: avg(&|d| d.sigma_rl),
        episodes: n_episodes,
        success_rate: wins as f64 / n,
        mean_length: len as f64 / n,
        rl_ratio: rl / n,
        switch_stats: SwitchStats::from_records(&all),
    })
}
