//! Deterministic 2D manipulation environments.
//!
//! Each task is a kinematic point-mass end effector in the unit square with
//! a three-mode gripper and a handful of objects whose discrete latches
//! (drawer open, lid on, plug seated, fold count) only change when the
//! geometric preconditions hold at the moment the gripper acts.
//!
//! Reward is sparse: `1.0` on the step the success predicate first becomes
//! true, `0.0` otherwise. Episodes end on success or at the horizon.

mod task;

pub use task::{GripPhase, InitRange, TaskId, TaskSpec, Waypoint};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ARM_DIM: usize = 2;
pub const GRIPPER_MODES: usize = 3;

/// Gripper command, and gripper state.
///
/// As a command: `Open` releases, `Closed` closes (grasping whatever is in
/// reach), `Hold` keeps the current state. As a state: `Hold` means closed
/// around an object, `Closed` means closed on nothing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GripperMode {
    Open,
    Hold,
    Closed,
}

impl GripperMode {
    pub const ALL: [GripperMode; 3] = [GripperMode::Open, GripperMode::Hold, GripperMode::Closed];

    pub fn index(self) -> usize {
        match self {
            GripperMode::Open => 0,
            GripperMode::Hold => 1,
            GripperMode::Closed => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            GripperMode::Open => "open",
            GripperMode::Hold => "hold",
            GripperMode::Closed => "closed",
        }
    }
}

/// Incremental end-effector command; components are clamped to `[-1, 1]`
/// and scaled by the task's per-step displacement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmAction {
    pub delta: [f32; 2],
}

impl ArmAction {
    pub fn new(dx: f32, dy: f32) -> Self {
        Self {
            delta: [dx.clamp(-1.0, 1.0), dy.clamp(-1.0, 1.0)],
        }
    }

    pub fn zero() -> Self {
        Self { delta: [0.0, 0.0] }
    }

    pub fn from_slice(v: &[f32]) -> Self {
        Self::new(v[0], v[1])
    }
}

/// Discrete task state. Fields not used by a task keep their defaults.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Latches {
    /// Drawer extension in `[0, 1]`.
    pub drawer_ext: f32,
    pub block_in_drawer: bool,
    pub lid_on: bool,
    pub towel_in_box: bool,
    pub plug_seated: [bool; 2],
    pub fold_count: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub task: TaskId,
    pub ee_pos: [f32; 2],
    pub ee_vel: [f32; 2],
    pub gripper: GripperMode,
    /// Per-task object positions; see [`TaskId::object_names`].
    pub objects: Vec<[f32; 2]>,
    pub held: Option<usize>,
    pub latches: Latches,
    pub step_index: u32,
    pub succeeded: bool,
    pub done: bool,
}

/// Result of one environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: EnvState,
    pub reward: f32,
    pub done: bool,
}

// Geometry shared by the built-in layouts.
const DRAWER_X: f32 = 0.70;
const DRAWER_CLOSED_Y: f32 = 0.30;
const DRAWER_TRAVEL: f32 = 0.25;
const DRAWER_OPEN_EXT: f32 = 0.9;
const DRAWER_SHUT_EXT: f32 = 0.05;
const SLOT_OFFSET: f32 = 0.10;
const SLOT_HALF: [f32; 2] = [0.06, 0.05];

const BOX_CENTER: [f32; 2] = [0.70, 0.65];
const BOX_HALF: f32 = 0.08;
const LID_REST: [f32; 2] = [0.70, 0.30];
const LID_PARK_TOL: f32 = 0.03;

const SOCKETS: [[f32; 2]; 2] = [[0.75, 0.70], [0.75, 0.30]];

const FOLD_HALF: f32 = 0.20;
const FOLD_TOL: f32 = 0.02;
const FOLD_DRAG_SCALE: f32 = 0.5;

fn dist(a: [f32; 2], b: [f32; 2]) -> f32 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}


fn clamp_unit(p: [f32; 2]) -> [f32; 2] {
    [p[0].clamp(0.0, 1.0), p[1].clamp(0.0, 1.0)]
}

/// Handle y coordinate for a drawer extension.
fn handle_y(ext: f32) -> f32 {
    DRAWER_CLOSED_Y - ext * DRAWER_TRAVEL
}

fn slot_point(handle: [f32; 2]) -> [f32; 2] {
    [handle[0], handle[1] + SLOT_OFFSET]
}

/// Grip point and goal of the next fold for a towel centred at `c`.
fn fold_points(c: [f32; 2], fold_count: u8) -> ([f32; 2], [f32; 2]) {
    match fold_count {
        0 => ([c[0] + FOLD_HALF, c[1]], [c[0] - FOLD_HALF, c[1]]),
        _ => (
            [c[0] - FOLD_HALF / 2.0, c[1] + FOLD_HALF],
            [c[0] - FOLD_HALF / 2.0, c[1] - FOLD_HALF],
        ),
    }
}

/// Draws the initial state for `task` from `seed`.
pub fn reset(task: &TaskSpec, seed: u64) -> EnvState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sample = |name: &str, default: [f32; 2]| -> [f32; 2] {
        match task.init.iter().find(|r| r.object == name) {
            Some(r) => {
                let u: f32 = rng.random();
                let v: f32 = rng.random();
                clamp_unit([
                    r.center[0] + r.half_extent[0] * (2.0 * u - 1.0),
                    r.center[1] + r.half_extent[1] * (2.0 * v - 1.0),
                ])
            }
            None => default,
        }
    };
    let ee = sample("ee", task.start);
    let mut latches = Latches::default();
    let objects = match task.id {
        TaskId::DrawerPlace => {
            let block = sample("block", [0.25, 0.70]);
            vec![[DRAWER_X, handle_y(0.0)], block]
        }
        TaskId::LidBox => {
            latches.lid_on = true;
            let towel = sample("towel", [0.25, 0.35]);
            vec![BOX_CENTER, towel]
        }
        TaskId::DualInsert => {
            let p0 = sample("plug0", [0.20, 0.70]);
            let p1 = sample("plug1", [0.20, 0.30]);
            vec![p0, p1]
        }
        TaskId::DoubleFold => {
            let c = sample("towel", [0.50, 0.50]);
            let (grip, _) = fold_points(c, 0);
            vec![grip, c]
        }
    };
    EnvState {
        task: task.id,
        ee_pos: ee,
        ee_vel: [0.0, 0.0],
        gripper: GripperMode::Open,
        objects,
        held: None,
        latches,
        step_index: 0,
        succeeded: false,
        done: false,
    }
}

/// Advances the environment one tick.
pub fn step(task: &TaskSpec, state: &EnvState, arm: ArmAction, grip: GripperMode) -> Result<StepOutcome> {
    if state.done || state.step_index >= task.horizon {
        return Err(Error::Contract(format!(
            "step called on a terminal state (step {})",
            state.step_index
        )));
    }
    if state.task != task.id {
        return Err(Error::Contract(format!(
            "state belongs to {} but task is {}",
            state.task.name(),
            task.id.name()
        )));
    }
    let mut s = state.clone();
    let arm = ArmAction::new(arm.delta[0], arm.delta[1]);
    let mut max_step = task.max_step;
    if task.id == TaskId::DoubleFold && s.held.is_some() {
        max_step *= FOLD_DRAG_SCALE;
    }
    let old = s.ee_pos;
    let mut target = clamp_unit([
        old[0] + arm.delta[0] * max_step,
        old[1] + arm.delta[1] * max_step,
    ]);

    // Motion, including constraints imposed by whatever is held.
    match (task.id, s.held) {
        (TaskId::DrawerPlace, Some(0)) => {
            target[0] = DRAWER_X;
            target[1] = target[1].clamp(handle_y(1.0), handle_y(0.0));
            s.latches.drawer_ext = (DRAWER_CLOSED_Y - target[1]) / DRAWER_TRAVEL;
            s.objects[0] = target;
            if s.latches.block_in_drawer {
                s.objects[1] = slot_point(target);
            }
        }
        (_, Some(i)) => s.objects[i] = target,
        (_, None) => {}
    }
    s.ee_pos = target;
    s.ee_vel = [target[0] - old[0], target[1] - old[1]];

    match grip {
        GripperMode::Hold => {}
        GripperMode::Open => {
            if let Some(i) = s.held.take() {
                release(task, &mut s, i);
            }
            s.gripper = GripperMode::Open;
        }
        GripperMode::Closed => {
            if s.gripper == GripperMode::Open {
                match nearest_graspable(task, &s) {
                    Some(i) => {
                        s.held = Some(i);
                        s.gripper = GripperMode::Hold;
                        on_grasp(task, &mut s, i);
                    }
                    None => s.gripper = GripperMode::Closed,
                }
            }
        }
    }

    s.step_index += 1;
    let now = success(&s, task);
    let reward = if now && !s.succeeded { 1.0 } else { 0.0 };
    s.succeeded |= now;
    s.done = s.succeeded || s.step_index >= task.horizon;
    Ok(StepOutcome {
        done: s.done,
        reward,
        state: s,
    })
}

fn graspable(task: &TaskSpec, s: &EnvState, i: usize) -> bool {
    match task.id {
        TaskId::DrawerPlace => i == 0 || !s.latches.block_in_drawer,
        TaskId::LidBox => i == 0 || !s.latches.towel_in_box,
        TaskId::DualInsert => !s.latches.plug_seated[i],
        TaskId::DoubleFold => i == 0 && s.latches.fold_count < 2,
    }
}

fn nearest_graspable(task: &TaskSpec, s: &EnvState) -> Option<usize> {
    (0..s.objects.len())
        .filter(|&i| graspable(task, s, i))
        .map(|i| (i, dist(s.ee_pos, s.objects[i])))
        .filter(|&(_, d)| d <= task.grasp_radius)
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i)
}

fn on_grasp(task: &TaskSpec, s: &mut EnvState, i: usize) {
    match (task.id, i) {
        // The handle only slides along the drawer axis; lock onto it.
        (TaskId::DrawerPlace, 0) => s.ee_pos = s.objects[0],
        (TaskId::LidBox, 0) => s.latches.lid_on = false,
        _ => {}
    }
}

fn lid_covers_box(s: &EnvState) -> bool {
    let lid = s.objects[0];
    (lid[0] - BOX_CENTER[0]).abs() <= BOX_HALF && (lid[1] - BOX_CENTER[1]).abs() <= BOX_HALF
}

fn release(task: &TaskSpec, s: &mut EnvState, i: usize) {
    match (task.id, i) {
        (TaskId::DrawerPlace, 1) => {
            let slot = slot_point(s.objects[0]);
            let b = s.objects[1];
            if s.latches.drawer_ext >= DRAWER_OPEN_EXT
                && (b[0] - slot[0]).abs() <= SLOT_HALF[0]
                && (b[1] - slot[1]).abs() <= SLOT_HALF[1]
            {
                s.latches.block_in_drawer = true;
                s.objects[1] = slot;
            }
        }
        (TaskId::LidBox, 0) => {
            if dist(s.objects[0], BOX_CENTER) <= task.insert_tol * 1.5 {
                s.latches.lid_on = true;
                s.objects[0] = BOX_CENTER;
            }
        }
        (TaskId::LidBox, 1) => {
            let t = s.objects[1];
            if !s.latches.lid_on
                && !lid_covers_box(s)
                && (t[0] - BOX_CENTER[0]).abs() <= BOX_HALF - 0.02
                && (t[1] - BOX_CENTER[1]).abs() <= BOX_HALF - 0.02
            {
                s.latches.towel_in_box = true;
            }
        }
        (TaskId::DualInsert, p) => {
            if dist(s.objects[p], SOCKETS[p]) <= task.insert_tol {
                s.latches.plug_seated[p] = true;
                s.objects[p] = SOCKETS[p];
            }
        }
        (TaskId::DoubleFold, 0) => {
            let c = s.objects[1];
            let (rest, goal) = fold_points(c, s.latches.fold_count);
            if dist(s.objects[0], goal) <= FOLD_TOL {
                s.latches.fold_count += 1;
                s.objects[0] = if s.latches.fold_count < 2 {
                    fold_points(c, s.latches.fold_count).0
                } else {
                    goal
                };
            } else {
                s.objects[0] = rest;
            }
        }
        _ => {}
    }
}

/// Ground-truth success predicate.
pub fn success(state: &EnvState, task: &TaskSpec) -> bool {
    let l = &state.latches;
    match task.id {
        TaskId::DrawerPlace => l.block_in_drawer && l.drawer_ext <= DRAWER_SHUT_EXT,
        TaskId::LidBox => l.towel_in_box && l.lid_on,
        TaskId::DualInsert => l.plug_seated[0] && l.plug_seated[1],
        TaskId::DoubleFold => l.fold_count >= 2,
    }
}

impl EnvState {
    /// Named point used by oracle programs and observations.
    pub fn point(&self, name: &str) -> Option<[f32; 2]> {
        let o = &self.objects;
        let p = match (self.task, name) {
            (_, "here") => self.ee_pos,
            (TaskId::DrawerPlace, "handle") => o[0],
            (TaskId::DrawerPlace, "block") => o[1],
            (TaskId::DrawerPlace, "slot") => slot_point(o[0]),
            (TaskId::DrawerPlace, "handle_open") => [DRAWER_X, handle_y(1.0)],
            (TaskId::DrawerPlace, "handle_closed") => [DRAWER_X, handle_y(0.0)],
            (TaskId::LidBox, "lid") => o[0],
            (TaskId::LidBox, "towel") => o[1],
            (TaskId::LidBox, "box_center") => BOX_CENTER,
            (TaskId::LidBox, "lid_rest") => LID_REST,
            (TaskId::DualInsert, "plug0") => o[0],
            (TaskId::DualInsert, "plug1") => o[1],
            (TaskId::DualInsert, "socket0") => SOCKETS[0],
            (TaskId::DualInsert, "socket1") => SOCKETS[1],
            (TaskId::DoubleFold, "corner") => o[0],
            (TaskId::DoubleFold, "towel_center") => o[1],
            (TaskId::DoubleFold, "fold_goal") => fold_points(o[1], self.latches.fold_count.min(1)).1,
            _ => return None,
        };
        Some(p)
    }

    /// Named boolean fact used by oracle programs.
    pub fn atom(&self, name: &str) -> Option<bool> {
        if let Some(obj) = name.strip_prefix("holding:") {
            let idx = self.task.object_names().iter().position(|n| *n == obj)?;
            return Some(self.held == Some(idx));
        }
        let l = &self.latches;
        let v = match (self.task, name) {
            (_, "gripper_open") => self.gripper == GripperMode::Open,
            (TaskId::DrawerPlace, "drawer_open") => l.drawer_ext >= DRAWER_OPEN_EXT,
            (TaskId::DrawerPlace, "drawer_closed") => l.drawer_ext <= DRAWER_SHUT_EXT,
            (TaskId::DrawerPlace, "block_in_drawer") => l.block_in_drawer,
            (TaskId::LidBox, "lid_on") => l.lid_on,
            (TaskId::LidBox, "lid_parked") => dist(self.objects[0], LID_REST) <= LID_PARK_TOL,
            (TaskId::LidBox, "towel_in_box") => l.towel_in_box,
            (TaskId::LidBox, "box_clear") => !lid_covers_box(self),
            (TaskId::DualInsert, "plug0_seated") => l.plug_seated[0],
            (TaskId::DualInsert, "plug1_seated") => l.plug_seated[1],
            (TaskId::DoubleFold, "fold1") => l.fold_count >= 1,
            (TaskId::DoubleFold, "fold2") => l.fold_count >= 2,
            _ => return None,
        };
        Some(v)
    }
}

/// Fixed-length feature vector fed to every network.
///
/// Layout: end-effector position, velocity in units of `max_step`, gripper
/// one-hot, then each of the task's observed points relative to the end
/// effector (scaled by 10), latch features and a held-object one-hot.
pub fn observe(state: &EnvState, task: &TaskSpec) -> Vec<f32> {
    const REL_SCALE: f32 = 10.0;
    let mut v = Vec::with_capacity(task.id.obs_dim());
    v.extend_from_slice(&state.ee_pos);
    v.push(state.ee_vel[0] / task.max_step);
    v.push(state.ee_vel[1] / task.max_step);
    let mut onehot = [0.0f32; 3];
    onehot[state.gripper.index()] = 1.0;
    v.extend_from_slice(&onehot);
    for name in task.id.observed_points() {
        let p = state.point(name).expect("observed point defined for task");
        v.push((p[0] - state.ee_pos[0]) * REL_SCALE);
        v.push((p[1] - state.ee_pos[1]) * REL_SCALE);
    }
    let flag = |b: bool| if b { 1.0 } else { 0.0 };
    match task.id {
        TaskId::DrawerPlace => {
            v.push(state.latches.drawer_ext);
            for a in ["block_in_drawer", "drawer_open", "drawer_closed"] {
                v.push(flag(state.atom(a).unwrap_or(false)));
            }
        }
        TaskId::LidBox => {
            for a in ["lid_on", "lid_parked", "towel_in_box", "box_clear"] {
                v.push(flag(state.atom(a).unwrap_or(false)));
            }
        }
        TaskId::DualInsert => {
            v.push(flag(state.latches.plug_seated[0]));
            v.push(flag(state.latches.plug_seated[1]));
        }
        TaskId::DoubleFold => {
            v.push(flag(state.latches.fold_count >= 1));
            v.push(flag(state.latches.fold_count >= 2));
        }
    }
    for i in 0..state.objects.len() {
        v.push(flag(state.held == Some(i)));
    }
    debug_assert_eq!(v.len(), task.id.obs_dim());
    v
}

/// End-effector displacement between two states.
pub fn displacement(a: &EnvState, b: &EnvState) -> f32 {
    dist(a.ee_pos, b.ee_pos)
}

pub(crate) fn distance(a: [f32; 2], b: [f32; 2]) -> f32 {
    dist(a, b)
}


#[cfg(test)]
mod tests {
    use super::*;

    fn spec(id: TaskId) -> TaskSpec {
        TaskSpec::builtin(id)
    }

    #[test]
    fn reset_is_deterministic() {
        for id in TaskId::ALL {
            let t = spec(id);
            assert_eq!(reset(&t, 9), reset(&t, 9));
        }
    }

    #[test]
    fn zero_width_range_gives_fixed_start() {
        let mut t = spec(TaskId::DrawerPlace);
        for r in &mut t.init {
            r.half_extent = [0.0, 0.0];
        }
        let a = reset(&t, 1);
        let b = reset(&t, 2);
        assert_eq!(a, b);
    }

    #[test]
    fn zero_action_keeps_position() {
        let t = spec(TaskId::LidBox);
        let s = reset(&t, 3);
        let out = step(&t, &s, ArmAction::zero(), GripperMode::Hold).unwrap();
        assert_eq!(out.state.ee_pos, s.ee_pos);
        assert_eq!(out.reward, 0.0);
        assert!(!out.done);
    }

    #[test]
    fn wall_clamps_position() {
        let t = spec(TaskId::DualInsert);
        let mut s = reset(&t, 0);
        s.ee_pos = [0.99, 0.005];
        let out = step(&t, &s, ArmAction::new(1.0, -1.0), GripperMode::Hold).unwrap();
        assert_eq!(out.state.ee_pos, [1.0, 0.0]);
    }

    #[test]
    fn terminal_state_cannot_step() {
        let t = spec(TaskId::DoubleFold);
        let mut s = reset(&t, 0);
        s.done = true;
        assert!(step(&t, &s, ArmAction::zero(), GripperMode::Hold).is_err());
        let mut s = reset(&t, 0);
        s.step_index = t.horizon;
        assert!(step(&t, &s, ArmAction::zero(), GripperMode::Hold).is_err());
    }

    #[test]
    fn initial_states_are_not_successful() {
        for id in TaskId::ALL {
            let t = spec(id);
            for seed in 0..20 {
                assert!(!success(&reset(&t, seed), &t));
            }
        }
    }

    #[test]
    fn drawer_success_definition() {
        let t = spec(TaskId::DrawerPlace);
        let mut s = reset(&t, 0);
        s.latches.block_in_drawer = true;
        s.latches.drawer_ext = 0.0;
        assert!(success(&s, &t));
        s.latches.drawer_ext = 0.5;
        assert!(!success(&s, &t));
    }

    #[test]
    fn lid_box_needs_the_lid_back() {
        let t = spec(TaskId::LidBox);
        let mut s = reset(&t, 0);
        s.latches.towel_in_box = true;
        s.latches.lid_on = false;
        assert!(!success(&s, &t));
        s.latches.lid_on = true;
        assert!(success(&s, &t));
    }

    #[test]
    fn plug_seats_only_within_tolerance_and_after_release() {
        let t = spec(TaskId::DualInsert);
        let mut s = reset(&t, 0);
        s.ee_pos = s.objects[0];
        let s = step(&t, &s, ArmAction::zero(), GripperMode::Closed).unwrap().state;
        assert_eq!(s.held, Some(0));
        // Carry it next to the socket but outside the tolerance.
        let mut near = s.clone();
        near.ee_pos = [SOCKETS[0][0] + 2.0 * t.insert_tol, SOCKETS[0][1]];
        near.objects[0] = near.ee_pos;
        assert!(!near.latches.plug_seated[0]);
        let dropped = step(&t, &near, ArmAction::zero(), GripperMode::Open).unwrap().state;
        assert!(!dropped.latches.plug_seated[0]);
        let mut at = s.clone();
        at.ee_pos = [SOCKETS[0][0] + 0.5 * t.insert_tol, SOCKETS[0][1]];
        at.objects[0] = at.ee_pos;
        let seated = step(&t, &at, ArmAction::zero(), GripperMode::Open).unwrap().state;
        assert!(seated.latches.plug_seated[0]);
        assert_eq!(seated.held, None);
    }

    #[test]
    fn closing_on_nothing_then_closing_again_does_not_grasp() {
        let t = spec(TaskId::DualInsert);
        let mut s = reset(&t, 0);
        s.ee_pos = [0.5, 0.5];
        let s = step(&t, &s, ArmAction::zero(), GripperMode::Closed).unwrap().state;
        assert_eq!(s.gripper, GripperMode::Closed);
        let mut moved = s.clone();
        moved.ee_pos = moved.objects[0];
        let s2 = step(&t, &moved, ArmAction::zero(), GripperMode::Closed).unwrap().state;
        assert_eq!(s2.held, None);
    }

    #[test]
    fn observation_width_matches_task() {
        for id in TaskId::ALL {
            let t = spec(id);
            assert_eq!(observe(&reset(&t, 0), &t).len(), id.obs_dim());
        }
    }
}
