use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::OraclePolicy;
use crate::env::{ArmAction, EnvState, GripperMode, TaskSpec};
use crate::error::{Error, Result};

/// When the automatic supervisor takes control of an episode.
///
/// This is a stand-in for a human watching the robot; it is not meant to
/// model how people decide to step in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Trigger {
    Off,
    /// No phase change and no approach of at least `eps` toward the active
    /// oracle waypoint over the last `k` steps.
    Stuck { k: usize, eps: f32 },
    /// End effector farther than `d` from the active oracle waypoint.
    OutOfRegion { d: f32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterventionRule {
    pub trigger: Trigger,
    pub max_per_episode: u32,
    /// Steps the supervisor keeps control once it takes over.
    pub handover: u32,
}

impl Default for InterventionRule {
    fn default() -> Self {
        Self {
            trigger: Trigger::Stuck { k: 15, eps: 0.005 },
            max_per_episode: 3,
            handover: 10,
        }
    }
}

impl InterventionRule {
    pub fn off() -> Self {
        Self {
            trigger: Trigger::Off,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.trigger {
            Trigger::Stuck { k, eps } if k < 1 || !(eps >= 0.0) => Err(Error::Config(format!(
                "stuck trigger needs k >= 1 and eps >= 0 (got k={k}, eps={eps})"
            ))),
            Trigger::OutOfRegion { d } if !(d > 0.0) => {
                Err(Error::Config(format!("out_of_region trigger needs d > 0 (got {d})")))
            }
            _ if self.handover < 1 => Err(Error::Config("handover must be at least 1 step".into())),
            _ => Ok(()),
        }
    }
}

/// Where the episode stands relative to the oracle program.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Progress {
    pub phase: Option<usize>,
    pub distance: f32,
}

#[derive(Debug, Clone, Default)]
pub struct InterventionHistory {
    recent: VecDeque<Progress>,
    used: u32,
    handover_left: u32,
}

impl InterventionHistory {
    pub fn push(&mut self, p: Progress, keep: usize) {
        self.recent.push_back(p);
        while self.recent.len() > keep {
            self.recent.pop_front();
        }
    }

    pub fn len(&self) -> usize {
        self.recent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.recent.is_empty()
    }

    pub fn used(&self) -> u32 {
        self.used
    }

    pub fn in_handover(&self) -> bool {
        self.handover_left > 0
    }

    pub fn clear(&mut self) {
        *self = Self::default();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    None,
    TakeOver,
}

/// Pure trigger check: `history` holds the progress of earlier steps, `now`
/// the current one.
pub fn maybe_intervene(rule: &InterventionRule, history: &InterventionHistory, now: Progress) -> Decision {
    if history.used >= rule.max_per_episode || now.phase.is_none() {
        return Decision::None;
    }
    let fire = match rule.trigger {
        Trigger::Off => false,
        Trigger::Stuck { k, eps } => {
            if history.recent.len() < k {
                false
            } else {
                let window: Vec<Progress> = history
                    .recent
                    .iter()
                    .skip(history.recent.len() - k)
                    .copied()
                    .chain(std::iter::once(now))
                    .collect();
                let same_phase = window.iter().all(|p| p.phase == now.phase);
                let best = window[1..].iter().map(|p| p.distance).fold(f32::INFINITY, f32::min);
                same_phase && window[0].distance - best < eps
            }
        }
        Trigger::OutOfRegion { d } => now.distance > d,
    };
    if fire {
        Decision::TakeOver
    } else {
        Decision::None
    }
}

/// Anything that may override the policy's action before a step.
pub trait InterventionSource: Send {
    fn begin_episode(&mut self, _task: &TaskSpec, _episode: u64) {}

    /// `Some(action)` replaces the policy's action for this step and marks
    /// the resulting transition as intervened.
    fn decide(&mut self, task: &TaskSpec, state: &EnvState) -> Option<(ArmAction, GripperMode)>;
}

pub struct NoIntervention;

impl InterventionSource for NoIntervention {
    fn decide(&mut self, _: &TaskSpec, _: &EnvState) -> Option<(ArmAction, GripperMode)> {
        None
    }
}

/// The oracle watching the rollout and taking over under `rule`.
pub struct ScriptedIntervention {
    pub rule: InterventionRule,
    policy: OraclePolicy,
    history: InterventionHistory,
    rng: ChaCha8Rng,
    seed: u64,
}

impl ScriptedIntervention {
    pub fn new(rule: InterventionRule, policy: OraclePolicy, seed: u64) -> Self {
        Self {
            rule,
            policy,
            history: InterventionHistory::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            seed,
        }
    }

    pub fn history(&self) -> &InterventionHistory {
        &self.history
    }
}

impl InterventionSource for ScriptedIntervention {
    fn begin_episode(&mut self, _task: &TaskSpec, episode: u64) {
        self.history.clear();
        self.rng = ChaCha8Rng::seed_from_u64(self.seed ^ episode.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    }

    fn decide(&mut self, task: &TaskSpec, state: &EnvState) -> Option<(ArmAction, GripperMode)> {
        if self.history.handover_left > 0 {
            self.history.handover_left -= 1;
            if self.history.handover_left == 0 {
                self.history.recent.clear();
            }
            let a = self.policy.act(task, state, &mut self.rng);
            return Some((a.arm, a.grip));
        }
        let now = self.policy.progress(state);
        let decision = maybe_intervene(&self.rule, &self.history, now);
        let keep = match self.rule.trigger {
            Trigger::Stuck { k, .. } => k,
            _ => 1,
        };
        self.history.push(now, keep);
        match decision {
            Decision::None => None,
            Decision::TakeOver => {
                self.history.used += 1;
                self.history.handover_left = self.rule.handover - 1;
                if self.history.handover_left == 0 {
                    self.history.recent.clear();
                }
                let a = self.policy.act(task, state, &mut self.rng);
                Some((a.arm, a.grip))
            }
        }
    }
}
