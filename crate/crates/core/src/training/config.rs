use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::TaskId;
use crate::error::{Error, Result};
use crate::oracle::InterventionRule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearningRates {
    pub bc: f32,
    pub rl_actor: f32,
    pub critic: f32,
    pub dbc: f32,
    pub gate: f32,
    pub alpha: f32,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            bc: 3e-4,
            rl_actor: 3e-4,
            critic: 3e-4,
            dbc: 3e-4,
            gate: 3e-4,
            alpha: 3e-4,
        }
    }
}

/// Ablation switches. `bc_only` and `rl_only` bypass the gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub no_bc_reg: bool,
    pub gripper_dqn: bool,
    pub bc_only: bool,
    pub rl_only: bool,
}

impl Ablation {
    pub const VARIANTS: [&'static str; 5] = ["base", "no_bc_reg", "gripper_dqn", "bc_only", "rl_only"];

    pub fn variant(name: &str) -> Result<Self> {
        let mut a = Self::default();
        match name {
            "base" => {}
            "no_bc_reg" => a.no_bc_reg = true,
            "gripper_dqn" => a.gripper_dqn = true,
            "bc_only" => a.bc_only = true,
            "rl_only" => a.rl_only = true,
            other => {
                return Err(Error::Config(format!(
                    "unknown variant {other:?}; expected one of {}",
                    Self::VARIANTS.join(", ")
                )))
            }
        }
        Ok(a)
    }
}

/// How the actor and learner are scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// One thread: step, update, step, update. The reproducible reference.
    #[default]
    Interleaved,
    /// Actor and learner threads joined by a transition queue.
    Threaded,
}

/// Every knob of a run. Serialized as TOML; any field can be overridden by a
/// dot path such as `lr.critic=1e-3` or `intervention.trigger.kind="off"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub task: TaskId,
    pub seed: u64,
    /// Optional task file; the built-in definition is used when empty.
    pub task_file: String,

    pub n_demos: usize,
    pub demo_noise: f32,

    pub n_offline: usize,
    pub online_episodes: usize,
    pub batch_size: usize,
    pub utd: usize,
    pub lr: LearningRates,

    pub gamma: f32,
    pub awac_lambda: f32,
    pub awac_samples: usize,
    pub awac_clip: f32,
    pub bc_nll_weight: f32,
    pub beta_reg: f32,
    pub alpha_spec: f32,
    pub beta_load: f32,
    pub gamma_ent: f32,
    pub tau: f32,
    pub target_entropy: f32,
    pub init_alpha: f32,
    pub dqn_epsilon: f32,

    pub hidden: Vec<usize>,
    pub gate_hidden: Vec<usize>,

    pub ablation: Ablation,
    pub intervention: InterventionRule,
    pub schedule: Schedule,

    /// Episodes between checkpoints (0 disables).
    pub checkpoint_every: usize,
    /// Update steps between loss records (0 disables).
    pub metrics_every: usize,
    pub capacity: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: TaskId::DrawerPlace,
            seed: 0,
            task_file: String::new(),
            n_demos: 20,
            demo_noise: 0.02,
            n_offline: 5000,
            online_episodes: 200,
            batch_size: 256,
            utd: 2,
            lr: LearningRates::default(),
            gamma: 0.97,
            awac_lambda: 1.0,
            awac_samples: 4,
            awac_clip: 20.0,
            bc_nll_weight: 0.1,
            beta_reg: 0.1,
            alpha_spec: 0.1,
            beta_load: 0.05,
            gamma_ent: 0.01,
            tau: 0.005,
            target_entropy: -2.0,
            init_alpha: 0.1,
            dqn_epsilon: 0.1,
            hidden: vec![256, 256],
            gate_hidden: vec![64, 64],
            ablation: Ablation::default(),
            intervention: InterventionRule::default(),
            schedule: Schedule::Interleaved,
            checkpoint_every: 0,
            metrics_every: 100,
            capacity: crate::buffers::DEFAULT_CAPACITY,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("reading {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `key.path=value` overrides. Values are parsed as TOML
    /// literals, falling back to a bare string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut root = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let o = o.as_ref();
            let (path, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            let value = parse_literal(raw.trim());
            let mut node = &mut root;
            let keys: Vec<&str> = path.trim().split('.').collect();
            for (i, k) in keys.iter().enumerate() {
                let table = node
                    .as_table_mut()
                    .ok_or_else(|| Error::Config(format!("override {path:?}: {k:?} is not inside a table")))?;
                if i + 1 == keys.len() {
                    table.insert(k.to_string(), value.clone());
                    break;
                }
                node = table
                    .entry(k.to_string())
                    .or_insert_with(|| toml::Value::Table(Default::default()));
            }
        }
        let cfg: RunConfig = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("after overrides: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma must lie in (0, 1), got {}", self.gamma));
        }
        if !(self.awac_lambda > 0.0) {
            return bad(format!("awac_lambda must be positive, got {}", self.awac_lambda));
        }
        for (name, v) in [
            ("beta_reg", self.beta_reg),
            ("alpha_spec", self.alpha_spec),
            ("beta_load", self.beta_load),
            ("gamma_ent", self.gamma_ent),
            ("bc_nll_weight", self.bc_nll_weight),
            ("awac_clip", self.awac_clip),
            ("demo_noise", self.demo_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad(format!("tau must lie in (0, 1], got {}", self.tau));
        }
        if !(self.init_alpha > 0.0) {
            return bad(format!("init_alpha must be positive, got {}", self.init_alpha));
        }
        if !(0.0..=1.0).contains(&self.dqn_epsilon) {
            return bad(format!("dqn_epsilon must lie in [0, 1], got {}", self.dqn_epsilon));
        }
        if self.utd < 1 {
            return bad("utd must be at least 1".into());
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2".into());
        }
        if self.awac_samples < 1 {
            return bad("awac_samples must be at least 1".into());
        }
        if self.hidden.is_empty() || self.gate_hidden.is_empty() {
            return bad("hidden layer lists must be non-empty".into());
        }
        if self.ablation.bc_only && self.ablation.rl_only {
            return bad("bc_only and rl_only are mutually exclusive".into());
        }
        let lr = &self.lr;
        for v in [lr.bc, lr.rl_actor, lr.critic, lr.dbc, lr.gate, lr.alpha] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("learning rates must be positive, got {v}"));
            }
        }
        self.intervention.validate()
    }

    /// BC-regularization weight after ablations.
    pub fn effective_beta_reg(&self) -> f32 {
        if self.ablation.no_bc_reg {
            0.0
        } else {
            self.beta_reg
        }
    }

    pub fn arbitration(&self) -> crate::experts::Arbitration {
        use crate::experts::Arbitration;
        if self.ablation.bc_only {
            Arbitration::AlwaysBc
        } else if self.ablation.rl_only {
            Arbitration::AlwaysRl
        } else {
            Arbitration::Gate
        }
    }

    pub fn task_spec(&self) -> Result<crate::env::TaskSpec> {
        use crate::env::TaskSpec;
        if self.task_file.is_empty() {
            return Ok(TaskSpec::builtin(self.task));
        }
        let spec = TaskSpec::load(Path::new(&self.task_file))?;
        if spec.id != self.task {
            return Err(Error::Config(format!(
                "task file {} defines {} but the run is for {}",
                self.task_file,
                spec.id.name(),
                self.task.name()
            )));
        }
        Ok(spec)
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::Trigger;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml_str(&cfg.to_toml()).unwrap(), cfg);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn dot_path_overrides() {
        let cfg = RunConfig::default()
            .with_overrides(&[
                "lr.critic=1e-3",
                "task=lid_box",
                "ablation.no_bc_reg=true",
                "intervention.trigger.kind=off",
                "hidden=[32, 32]",
            ])
            .unwrap();
        assert_eq!(cfg.lr.critic, 1e-3);
        assert_eq!(cfg.task, TaskId::LidBox);
        assert!(cfg.ablation.no_bc_reg);
        assert_eq!(cfg.effective_beta_reg(), 0.0);
        assert_eq!(cfg.intervention.trigger, Trigger::Off);
        assert_eq!(cfg.hidden, vec![32, 32]);
    }

    #[test]
    fn invalid_values_are_rejected() {
        let base = RunConfig::default();
        for o in ["gamma=1.0", "awac_lambda=0", "utd=0", "beta_reg=-1", "nonsense=3", "lr.bc=0"] {
            assert!(base.with_overrides(&[o]).is_err(), "{o}");
        }
        assert!(base.with_overrides(&["ablation.bc_only=true", "ablation.rl_only=true"]).is_err());
        assert!(base.with_overrides(&["novalue"]).is_err());
        assert!(RunConfig::from_toml_str("gamma = 0.5\nbogus = 1").is_err());
    }

    #[test]
    fn variants() {
        assert!(Ablation::variant("no_bc_reg").unwrap().no_bc_reg);
        assert_eq!(Ablation::variant("base").unwrap(), Ablation::default());
        assert!(Ablation::variant("nope").is_err());
    }
}
