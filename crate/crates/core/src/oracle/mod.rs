//! Scripted waypoint policies and the automatic intervention rule.
//!
//! An oracle program is an ordered list of waypoints. The active waypoint is
//! the first one whose `done` predicate is false in the current state, so the
//! program is re-entrant: after any disturbance (a dropped object, a policy
//! that wandered off) the oracle picks up from whatever the state implies.

mod intervene;
mod predicate;

pub use intervene::{
    maybe_intervene, Decision, InterventionHistory, InterventionRule, InterventionSource,
    NoIntervention, Progress, ScriptedIntervention, Trigger,
};
pub use predicate::Predicate;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::env::{self, ArmAction, EnvState, GripPhase, GripperMode, TaskId, TaskSpec};
use crate::error::{Error, Result};

/// A grasp fires once the end effector is within this fraction of the
/// task's grasp radius, well inside the region where it works.
pub const GRASP_FRACTION: f32 = 0.5;
/// A release fires anywhere inside this fraction of the insertion
/// tolerance, so a learner that settles slightly short of the target still
/// sees demonstrations that release there.
pub const RELEASE_FRACTION: f32 = 0.9;
/// Noise is only injected while farther than this from the target, so
/// precise placements stay precise.
pub const NOISE_RADIUS: f32 = 0.05;
/// Largest action norm the oracle commands. Staying clear of the action
/// bounds keeps demonstrated actions away from the tanh asymptotes.
pub const ORACLE_SPEED: f32 = 0.8;
/// Fraction of the remaining distance covered per step once within reach.
/// Below one, the final approach takes several steps, so demonstrations
/// show what a near-but-not-there state looks like.
pub const ORACLE_GAIN: f32 = 0.5;

#[derive(Debug, Clone)]
pub struct CompiledWaypoint {
    pub done: Predicate,
    pub target: String,
    pub grip: GripPhase,
}

#[derive(Debug, Clone)]
pub struct OraclePolicy {
    pub task: TaskId,
    pub program: Vec<CompiledWaypoint>,
    /// Standard deviation of the per-step positional jitter, in workspace units.
    pub noise: f32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleAction {
    pub arm: ArmAction,
    pub grip: GripperMode,
    /// Index of the active waypoint; `None` when every `done` predicate
    /// already holds (the oracle then holds still).
    pub phase: Option<usize>,
    pub target: Option<[f32; 2]>,
}

impl OracleAction {
    pub fn stalled(&self) -> bool {
        self.phase.is_none()
    }
}

impl OraclePolicy {
    /// Parses and checks the task's waypoint program against a reset state.
    pub fn compile(task: &TaskSpec, noise: f32) -> Result<Self> {
        if task.oracle.is_empty() {
            return Err(Error::Config(format!("task {} has no oracle program", task.id.name())));
        }
        if !(noise.is_finite() && noise >= 0.0) {
            return Err(Error::Config(format!("oracle noise must be non-negative, got {noise}")));
        }
        let probe = env::reset(task, 0);
        let mut program = Vec::with_capacity(task.oracle.len());
        for (i, w) in task.oracle.iter().enumerate() {
            let done = Predicate::parse(&w.done)
                .map_err(|e| Error::Config(format!("oracle step {i}: {e}")))?;
            for atom in done.atoms() {
                if probe.atom(atom).is_none() {
                    return Err(Error::Config(format!(
                        "oracle step {i}: unknown atom {atom:?} for {}",
                        task.id.name()
                    )));
                }
            }
            if probe.point(&w.target).is_none() {
                return Err(Error::Config(format!(
                    "oracle step {i}: unknown target {:?} for {}",
                    w.target,
                    task.id.name()
                )));
            }
            program.push(CompiledWaypoint {
                done,
                target: w.target.clone(),
                grip: w.grip,
            });
        }
        Ok(Self {
            task: task.id,
            program,
            noise,
        })
    }

    pub fn active_phase(&self, state: &EnvState) -> Option<usize> {
        self.program
            .iter()
            .position(|w| !w.done.eval(&|a| state.atom(a).unwrap_or(false)))
    }

    /// Proportional step toward the active waypoint.
    pub fn act<R: Rng + ?Sized>(&self, task: &TaskSpec, state: &EnvState, rng: &mut R) -> OracleAction {
        let Some(phase) = self.active_phase(state) else {
            return OracleAction {
                arm: ArmAction::zero(),
                grip: GripperMode::Hold,
                phase: None,
                target: None,
            };
        };
        let w = &self.program[phase];
        let target = state.point(&w.target).expect("targets checked at compile time");
        let d = env::distance(state.ee_pos, target);
        let reach = match w.grip {
            GripPhase::Grasp => GRASP_FRACTION * task.grasp_radius,
            GripPhase::Carry | GripPhase::Release => RELEASE_FRACTION * task.insert_tol,
        };
        let arrived = d <= reach;
        let mut delta = [
            ORACLE_GAIN * (target[0] - state.ee_pos[0]) / task.max_step,
            ORACLE_GAIN * (target[1] - state.ee_pos[1]) / task.max_step,
        ];
        if self.noise > 0.0 && d > NOISE_RADIUS {
            let n = Normal::new(0.0f32, self.noise / task.max_step).expect("valid std");
            delta[0] += n.sample(rng);
            delta[1] += n.sample(rng);
        }
        let norm = (delta[0] * delta[0] + delta[1] * delta[1]).sqrt();
        if norm > ORACLE_SPEED {
            delta = [delta[0] * ORACLE_SPEED / norm, delta[1] * ORACLE_SPEED / norm];
        }
        let grip = match (w.grip, arrived) {
            (GripPhase::Grasp, false) => GripperMode::Open,
            (GripPhase::Grasp, true) => GripperMode::Closed,
            (GripPhase::Carry, _) | (GripPhase::Release, false) => GripperMode::Hold,
            (GripPhase::Release, true) => GripperMode::Open,
        };
        OracleAction {
            arm: ArmAction::new(delta[0], delta[1]),
            grip,
            phase: Some(phase),
            target: Some(target),
        }
    }

    /// Distance from the end effector to the active waypoint, with the phase.
    pub fn progress(&self, state: &EnvState) -> Progress {
        match self.active_phase(state) {
            Some(p) => {
                let target = state.point(&self.program[p].target).expect("checked target");
                Progress {
                    phase: Some(p),
                    distance: env::distance(state.ee_pos, target),
                }
            }
            None => Progress {
                phase: None,
                distance: 0.0,
            },
        }
    }
}

/// Runs the oracle from `reset(task, seed)` until the episode ends.
/// Returns the visited states (including the initial one) and the actions.
pub fn rollout<R: Rng + ?Sized>(
    policy: &OraclePolicy,
    task: &TaskSpec,
    seed: u64,
    rng: &mut R,
) -> (Vec<EnvState>, Vec<OracleAction>) {
    let mut state = env::reset(task, seed);
    let mut states = vec![state.clone()];
    let mut actions = Vec::new();
    while !state.done {
        let a = policy.act(task, &state, rng);
        state = env::step(task, &state, a.arm, a.grip)
            .expect("state is not terminal")
            .state;
        actions.push(a);
        states.push(state.clone());
    }
    (states, actions)
}
