use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskId {
    DrawerPlace,
    LidBox,
    DualInsert,
    DoubleFold,
}

impl TaskId {
    pub const ALL: [TaskId; 4] = [
        TaskId::DrawerPlace,
        TaskId::LidBox,
        TaskId::DualInsert,
        TaskId::DoubleFold,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskId::DrawerPlace => "drawer_place",
            TaskId::LidBox => "lid_box",
            TaskId::DualInsert => "dual_insert",
            TaskId::DoubleFold => "double_fold",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown task {s:?}")))
    }

    /// Names of the movable objects, in `EnvState::objects` order.
    pub fn object_names(self) -> &'static [&'static str] {
        match self {
            TaskId::DrawerPlace => &["handle", "block"],
            TaskId::LidBox => &["lid", "towel"],
            TaskId::DualInsert => &["plug0", "plug1"],
            TaskId::DoubleFold => &["corner", "towel_center"],
        }
    }

    pub(crate) fn observed_points(self) -> &'static [&'static str] {
        match self {
            TaskId::DrawerPlace => &["handle", "block", "slot", "handle_open", "handle_closed"],
            TaskId::LidBox => &["lid", "towel", "box_center", "lid_rest"],
            TaskId::DualInsert => &["plug0", "plug1", "socket0", "socket1"],
            TaskId::DoubleFold => &["corner", "fold_goal", "towel_center"],
        }
    }

    fn latch_features(self) -> usize {
        match self {
            TaskId::DrawerPlace => 4,
            TaskId::LidBox => 4,
            TaskId::DualInsert | TaskId::DoubleFold => 2,
        }
    }

    /// Width of the observation vector produced by [`super::observe`].
    pub fn obs_dim(self) -> usize {
        2 + 2 + 3 + 2 * self.observed_points().len() + self.latch_features() + self.object_names().len()
    }

    /// Identifier of the success predicate a task file must name.
    pub fn success_id(self) -> &'static str {
        match self {
            TaskId::DrawerPlace => "block_in_closed_drawer",
            TaskId::LidBox => "towel_boxed_lid_on",
            TaskId::DualInsert => "both_plugs_seated",
            TaskId::DoubleFold => "two_folds",
        }
    }
}

/// Axis-aligned box from which an object's (or `"ee"`'s) start position is
/// drawn uniformly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitRange {
    pub object: String,
    pub center: [f32; 2],
    pub half_extent: [f32; 2],
}

/// How the gripper is driven while approaching a waypoint and on arrival.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GripPhase {
    /// Approach open, close on arrival.
    Grasp,
    /// Keep the current grip throughout.
    Carry,
    /// Approach holding, open on arrival.
    Release,
}

/// One step of a scripted oracle program.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    /// Predicate over state atoms that marks this step as finished, e.g.
    /// `"holding:handle | drawer_open"`.
    pub done: String,
    /// Named point to move to (`"here"` stays put).
    pub target: String,
    pub grip: GripPhase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub id: TaskId,
    pub horizon: u32,
    /// Workspace units moved by a unit arm command.
    pub max_step: f32,
    pub grasp_radius: f32,
    /// Positioning tolerance for insertions and placements.
    pub insert_tol: f32,
    pub start: [f32; 2],
    pub success: String,
    #[serde(default)]
    pub init: Vec<InitRange>,
    #[serde(default)]
    pub oracle: Vec<Waypoint>,
}

const DRAWER_PLACE: &str = include_str!("../../tasks/drawer_place.toml");
const LID_BOX: &str = include_str!("../../tasks/lid_box.toml");
const DUAL_INSERT: &str = include_str!("../../tasks/dual_insert.toml");
const DOUBLE_FOLD: &str = include_str!("../../tasks/double_fold.toml");

impl TaskSpec {
    /// The task definition shipped with the crate.
    pub fn builtin(id: TaskId) -> Self {
        let text = match id {
            TaskId::DrawerPlace => DRAWER_PLACE,
            TaskId::LidBox => LID_BOX,
            TaskId::DualInsert => DUAL_INSERT,
            TaskId::DoubleFold => DOUBLE_FOLD,
        };
        Self::from_toml_str(text).expect("built-in task file is valid")
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: TaskSpec =
            toml::from_str(text).map_err(|e| Error::Config(format!("task file: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("reading {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("task {}: {msg}", self.id.name())));
        if self.horizon < 1 {
            return bad("horizon must be at least 1".into());
        }
        for (name, v) in [
            ("max_step", self.max_step),
            ("grasp_radius", self.grasp_radius),
            ("insert_tol", self.insert_tol),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if self.success != self.id.success_id() {
            return bad(format!(
                "success predicate {:?} does not belong to this task (expected {:?})",
                self.success,
                self.id.success_id()
            ));
        }
        let inside = |p: f32| (0.0..=1.0).contains(&p);
        if !self.start.iter().all(|&p| inside(p)) {
            return bad("start outside the workspace".into());
        }
        for r in &self.init {
            if r.object != "ee" && !self.id.object_names().contains(&r.object.as_str()) {
                return bad(format!("init range for unknown object {:?}", r.object));
            }
            for k in 0..2 {
                let (c, h) = (r.center[k], r.half_extent[k]);
                if !(h >= 0.0 && inside(c - h) && inside(c + h)) {
                    return bad(format!("init range for {:?} leaves the workspace", r.object));
                }
            }
        }
        crate::oracle::OraclePolicy::compile(self, 0.0).map(|_| ())
    }
}
