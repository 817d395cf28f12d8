//! The learnable networks and the per-step arbitration between them.
//!
//! Both continuous experts are diagonal Gaussian heads emitting
//! `[mean | log_std]`; actions are `tanh` of the (sampled) pre-activation.
//! An expert's confidence signal is its variance
//! `sigma(s) = mean_i exp(2 log_std_i(s))`.

use std::path::Path;

use nnkit::heads::argmax;
use nnkit::{gaussian_logprob, Activation, Checkpoint, GaussianHead, MlpSpec, NamedParams, ParamVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{ArmAction, GripperMode, ARM_DIM, GRIPPER_MODES};
use crate::error::{Error, Result};

/// Network sizes for a bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleSpec {
    pub obs_dim: usize,
    pub hidden: Vec<usize>,
    pub gate_hidden: Vec<usize>,
}

impl BundleSpec {
    pub fn new(obs_dim: usize) -> Self {
        Self {
            obs_dim,
            hidden: vec![256, 256],
            gate_hidden: vec![64, 64],
        }
    }

    pub fn actor(&self) -> MlpSpec {
        MlpSpec::new(self.obs_dim, self.hidden.clone(), Activation::Relu, 2 * ARM_DIM)
    }

    pub fn critic(&self) -> MlpSpec {
        MlpSpec::new(self.obs_dim + ARM_DIM, self.hidden.clone(), Activation::Relu, 1)
    }

    pub fn gripper(&self) -> MlpSpec {
        MlpSpec::new(self.obs_dim, self.hidden.clone(), Activation::Relu, GRIPPER_MODES)
    }

    pub fn gate(&self) -> MlpSpec {
        MlpSpec::new(self.obs_dim, self.gate_hidden.clone(), Activation::Relu, 2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expert {
    Bc,
    Rl,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub w_bc: f32,
    pub w_rl: f32,
    pub sigma_bc: f32,
    pub sigma_rl: f32,
    pub selected: Expert,
}

/// Who picks the arm action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Arbitration {
    #[default]
    Gate,
    AlwaysBc,
    AlwaysRl,
}

/// All parameters of the mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertBundle {
    pub spec: BundleSpec,
    pub bc_actor: ParamVector,
    pub rl_actor: ParamVector,
    pub critic1: ParamVector,
    pub critic2: ParamVector,
    pub target1: ParamVector,
    pub target2: ParamVector,
    pub dbc: ParamVector,
    pub gate: ParamVector,
    pub alpha_log: f32,
    /// Gripper Q-network and its target; present only when the gripper is
    /// driven by a value function instead of the classifier head.
    pub gripper_q: Option<(ParamVector, ParamVector)>,
}

/// Gate output weights `(w_bc, w_rl)` from two logits.
pub fn gate_weights(logits: &[f32]) -> (f32, f32) {
    let (a, b) = (logits[0] as f64, logits[1] as f64);
    let m = a.max(b);
    let (ea, eb) = ((a - m).exp(), (b - m).exp());
    let w_bc = ea / (ea + eb);
    (w_bc as f32, (1.0 - w_bc) as f32)
}

/// The RL expert is chosen unless the imitation expert's weight is strictly
/// larger.
pub fn select(w_bc: f32, w_rl: f32) -> Expert {
    if w_bc > w_rl {
        Expert::Bc
    } else {
        Expert::Rl
    }
}

impl ExpertBundle {
    /// Fresh parameters. The gate's output layer is zero so that every state
    /// starts at exactly `(0.5, 0.5)`; actor output layers are scaled down so
    /// initial actions are small.
    pub fn init(spec: BundleSpec, seed: u64, with_gripper_q: bool) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let actor = spec.actor();
        let critic = spec.critic();
        let bc_actor = actor.init(&mut rng, 0.1)?;
        let rl_actor = actor.init(&mut rng, 0.1)?;
        let critic1 = critic.init(&mut rng, 1.0)?;
        let critic2 = critic.init(&mut rng, 1.0)?;
        let dbc = spec.gripper().init(&mut rng, 0.1)?;
        let gate = spec.gate().init(&mut rng, 0.0)?;
        let gripper_q = if with_gripper_q {
            let q = spec.gripper().init(&mut rng, 1.0)?;
            Some((q.clone(), q))
        } else {
            None
        };
        Ok(Self {
            target1: critic1.clone(),
            target2: critic2.clone(),
            spec,
            bc_actor,
            rl_actor,
            critic1,
            critic2,
            dbc,
            gate,
            alpha_log: 0.0,
            gripper_q,
        })
    }

    fn check_state(&self, state: &[f32]) -> Result<()> {
        if state.len() != self.spec.obs_dim {
            return Err(Error::Contract(format!(
                "state has {} features, networks expect {}",
                state.len(),
                self.spec.obs_dim
            )));
        }
        Ok(())
    }

    pub fn bc_head(&self, state: &[f32]) -> Result<GaussianHead> {
        self.check_state(state)?;
        let out = nnkit::forward(&self.bc_actor, &self.spec.actor(), state)?;
        Ok(GaussianHead::from_output(&out)?)
    }

    pub fn rl_head(&self, state: &[f32]) -> Result<GaussianHead> {
        self.check_state(state)?;
        let out = nnkit::forward(&self.rl_actor, &self.spec.actor(), state)?;
        Ok(GaussianHead::from_output(&out)?)
    }

    /// Imitation action (mode, or a squashed sample) and its variance signal.
    pub fn bc_act<R: Rng + ?Sized>(
        &self,
        state: &[f32],
        stochastic: bool,
        rng: &mut R,
    ) -> Result<(Vec<f32>, f32)> {
        let head = self.bc_head(state)?;
        let a = if stochastic {
            head.sample_squashed(rng)
        } else {
            head.squashed_mode()
        };
        Ok((a, head.mean_variance()))
    }

    /// RL action, its squashed log-density, and its variance signal.
    pub fn rl_act<R: Rng + ?Sized>(
        &self,
        state: &[f32],
        stochastic: bool,
        rng: &mut R,
    ) -> Result<(Vec<f32>, f64, f32)> {
        let head = self.rl_head(state)?;
        let a = if stochastic {
            head.sample_squashed(rng)
        } else {
            head.squashed_mode()
        };
        let lp = gaussian_logprob(&head, &a, true)?;
        Ok((a, lp, head.mean_variance()))
    }

    /// Twin critic outputs `(Q1, Q2)`, online or target.
    pub fn q_pair(&self, state: &[f32], action: &[f32], use_targets: bool) -> Result<(f32, f32)> {
        self.check_state(state)?;
        if action.len() != ARM_DIM {
            return Err(Error::Contract(format!("action has {} components", action.len())));
        }
        let mut x = state.to_vec();
        x.extend_from_slice(action);
        let spec = self.spec.critic();
        let (p1, p2) = if use_targets {
            (&self.target1, &self.target2)
        } else {
            (&self.critic1, &self.critic2)
        };
        Ok((nnkit::forward(p1, &spec, &x)?[0], nnkit::forward(p2, &spec, &x)?[0]))
    }

    pub fn q_min(&self, state: &[f32], action: &[f32], use_targets: bool) -> Result<f32> {
        let (a, b) = self.q_pair(state, action, use_targets)?;
        Ok(a.min(b))
    }

    pub fn dbc_logits(&self, state: &[f32]) -> Result<Vec<f32>> {
        self.check_state(state)?;
        Ok(nnkit::forward(&self.dbc, &self.spec.gripper(), state)?)
    }

    /// Most likely gripper command; ties resolve in the order open, hold, closed.
    pub fn dbc_act(&self, state: &[f32]) -> Result<GripperMode> {
        let logits = self.dbc_logits(state)?;
        Ok(GripperMode::from_index(argmax(&logits)).expect("three gripper classes"))
    }

    pub fn gripper_q_values(&self, state: &[f32]) -> Result<Option<Vec<f32>>> {
        self.check_state(state)?;
        match &self.gripper_q {
            Some((q, _)) => Ok(Some(nnkit::forward(q, &self.spec.gripper(), state)?)),
            None => Ok(None),
        }
    }

    /// Gripper command from whichever gripper policy the bundle carries.
    pub fn gripper_act(&self, state: &[f32]) -> Result<GripperMode> {
        match self.gripper_q_values(state)? {
            Some(q) => Ok(GripperMode::from_index(argmax(&q)).expect("three gripper classes")),
            None => self.dbc_act(state),
        }
    }

    pub fn gate_logits(&self, state: &[f32]) -> Result<Vec<f32>> {
        self.check_state(state)?;
        Ok(nnkit::forward(&self.gate, &self.spec.gate(), state)?)
    }

    pub fn gate_decision(&self, state: &[f32]) -> Result<GateDecision> {
        let (w_bc, w_rl) = gate_weights(&self.gate_logits(state)?);
        Ok(GateDecision {
            w_bc,
            w_rl,
            sigma_bc: self.bc_head(state)?.mean_variance(),
            sigma_rl: self.rl_head(state)?.mean_variance(),
            selected: select(w_bc, w_rl),
        })
    }

    /// Arm action from the selected expert plus the gripper command.
    pub fn compose_action<R: Rng + ?Sized>(
        &self,
        state: &[f32],
        stochastic: bool,
        arbitration: Arbitration,
        rng: &mut R,
    ) -> Result<(ArmAction, GripperMode, GateDecision)> {
        let mut decision = self.gate_decision(state)?;
        decision.selected = match arbitration {
            Arbitration::Gate => decision.selected,
            Arbitration::AlwaysBc => Expert::Bc,
            Arbitration::AlwaysRl => Expert::Rl,
        };
        let arm = match decision.selected {
            Expert::Bc => self.bc_act(state, stochastic, rng)?.0,
            Expert::Rl => self.rl_act(state, stochastic, rng)?.0,
        };
        let grip = self.gripper_act(state)?;
        Ok((ArmAction::from_slice(&arm), grip, decision))
    }

    /// `target <- (1 - tau) target + tau online` for both critics (and the
    /// gripper Q-network when present).
    pub fn polyak(&mut self, tau: f32) {
        fn blend(target: &mut ParamVector, online: &ParamVector, tau: f32) {
            for (t, &p) in target.values_mut().iter_mut().zip(online.values()) {
                *t = (1.0 - tau) * *t + tau * p;
            }
        }
        blend(&mut self.target1, &self.critic1, tau);
        blend(&mut self.target2, &self.critic2, tau);
        if let Some((q, qt)) = &mut self.gripper_q {
            blend(qt, q, tau);
        }
    }

    fn networks(&self) -> Vec<(&'static str, MlpSpec, &ParamVector)> {
        let s = &self.spec;
        let mut out = vec![
            ("bc_actor", s.actor(), &self.bc_actor),
            ("rl_actor", s.actor(), &self.rl_actor),
            ("critic1", s.critic(), &self.critic1),
            ("critic2", s.critic(), &self.critic2),
            ("critic1_target", s.critic(), &self.target1),
            ("critic2_target", s.critic(), &self.target2),
            ("dbc", s.gripper(), &self.dbc),
            ("gate", s.gate(), &self.gate),
        ];
        if let Some((q, qt)) = &self.gripper_q {
            out.push(("gripper_q", s.gripper(), q));
            out.push(("gripper_q_target", s.gripper(), qt));
        }
        out
    }

    /// Saves every network plus `alpha_log`; `meta` is copied into the
    /// manifest (the task name goes there).
    pub fn save(&self, dir: &Path, step: u64, meta: &[(String, String)]) -> Result<()> {
        let dims = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join("x");
        let mut all_meta = vec![
            ("obs_dim".to_string(), self.spec.obs_dim.to_string()),
            ("hidden".to_string(), dims(&self.spec.hidden)),
            ("gate_hidden".to_string(), dims(&self.spec.gate_hidden)),
        ];
        all_meta.extend(meta.iter().cloned());
        let ckpt = Checkpoint {
            step,
            meta: all_meta,
            networks: self
                .networks()
                .into_iter()
                .map(|(name, spec, p)| NamedParams {
                    name: name.to_string(),
                    spec_hash: spec.hash(),
                    params: p.clone(),
                })
                .collect(),
            scalars: vec![("alpha_log".to_string(), self.alpha_log)],
        };
        ckpt.save(dir)?;
        Ok(())
    }

    /// Loads a bundle; returns it with the checkpoint (for step and meta).
    pub fn load(dir: &Path) -> Result<(Self, Checkpoint)> {
        let ckpt = Checkpoint::load(dir)?;
        let bad = |m: String| Error::Checkpoint(format!("{}: {m}", dir.display()));
        let dims = |key: &str| -> Result<Vec<usize>> {
            ckpt.meta(key)
                .ok_or_else(|| bad(format!("missing meta {key}")))?
                .split('x')
                .map(|d| d.parse().map_err(|_| bad(format!("bad meta {key}"))))
                .collect()
        };
        let obs_dim = ckpt
            .meta("obs_dim")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("missing obs_dim".into()))?;
        let spec = BundleSpec {
            obs_dim,
            hidden: dims("hidden")?,
            gate_hidden: dims("gate_hidden")?,
        };
        let get = |name: &str, mlp: MlpSpec| -> Result<ParamVector> {
            let net = ckpt.network(name).ok_or_else(|| bad(format!("missing network {name}")))?;
            if net.spec_hash != mlp.hash() || net.params.layout() != mlp.layout().as_slice() {
                return Err(bad(format!("network {name} does not match its declared shape")));
            }
            Ok(net.params.clone())
        };
        let gripper_q = match ckpt.network("gripper_q") {
            Some(_) => Some((get("gripper_q", spec.gripper())?, get("gripper_q_target", spec.gripper())?)),
            None => None,
        };
        let bundle = Self {
            bc_actor: get("bc_actor", spec.actor())?,
            rl_actor: get("rl_actor", spec.actor())?,
            critic1: get("critic1", spec.critic())?,
            critic2: get("critic2", spec.critic())?,
            target1: get("critic1_target", spec.critic())?,
            target2: get("critic2_target", spec.critic())?,
            dbc: get("dbc", spec.gripper())?,
            gate: get("gate", spec.gate())?,
            alpha_log: ckpt.scalar("alpha_log").ok_or_else(|| bad("missing alpha_log".into()))?,
            gripper_q,
            spec,
        };
        Ok((bundle, ckpt))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BundleSpec {
        BundleSpec {
            obs_dim: 5,
            hidden: vec![8, 8],
            gate_hidden: vec![6],
        }
    }

    fn zero_last_layer(p: &mut ParamVector) {
        let n = p.layout().len();
        for idx in [n - 2, n - 1] {
            p.tensor_mut(idx).iter_mut().for_each(|v| *v = 0.0);
        }
    }

    #[test]
    fn zero_output_layers_give_zero_actions_and_even_gate() {
        let mut b = ExpertBundle::init(small(), 3, false).unwrap();
        zero_last_layer(&mut b.bc_actor);
        zero_last_layer(&mut b.rl_actor);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = [0.3, -0.1, 0.2, 0.9, 0.0];
        assert_eq!(b.bc_act(&s, false, &mut rng).unwrap().0, vec![0.0, 0.0]);
        assert_eq!(b.rl_act(&s, false, &mut rng).unwrap().0, vec![0.0, 0.0]);
        let d = b.gate_decision(&s).unwrap();
        assert_eq!((d.w_bc, d.w_rl), (0.5, 0.5));
        assert_eq!(d.selected, Expert::Rl);
        // log_std = 0 everywhere -> unit variance.
        assert_eq!((d.sigma_bc, d.sigma_rl), (1.0, 1.0));
    }

    #[test]
    fn gate_weights_and_selection() {
        let (w_bc, w_rl) = gate_weights(&[3.0, 0.0]);
        let e3 = 3f64.exp();
        assert!((w_bc as f64 - e3 / (e3 + 1.0)).abs() < 1e-6);
        assert!((w_bc + w_rl - 1.0).abs() < 1e-6);
        assert_eq!(select(w_bc, w_rl), Expert::Bc);
        assert_eq!(select(0.5, 0.5), Expert::Rl);
        assert_eq!(select(0.4, 0.6), Expert::Rl);
    }

    #[test]
    fn uniform_gripper_logits_pick_open() {
        let mut b = ExpertBundle::init(small(), 1, false).unwrap();
        zero_last_layer(&mut b.dbc);
        assert_eq!(b.dbc_act(&[0.0; 5]).unwrap(), GripperMode::Open);
    }

    #[test]
    fn q_min_is_min_of_pair_and_symmetric_when_identical() {
        let mut b = ExpertBundle::init(small(), 2, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let s: Vec<f32> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let a: Vec<f32> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (q1, q2) = b.q_pair(&s, &a, false).unwrap();
            let m = b.q_min(&s, &a, false).unwrap();
            assert!(m <= q1 && m <= q2 && (m == q1 || m == q2));
        }
        b.critic2 = b.critic1.clone();
        let (q1, _) = b.q_pair(&[0.1; 5], &[0.2, 0.3], false).unwrap();
        assert_eq!(b.q_min(&[0.1; 5], &[0.2, 0.3], false).unwrap(), q1);
    }

    #[test]
    fn rl_logprob_matches_head_density() {
        let b = ExpertBundle::init(small(), 4, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = [0.5, 0.1, -0.3, 0.0, 1.0];
        let (a, lp, _) = b.rl_act(&s, true, &mut rng).unwrap();
        let head = b.rl_head(&s).unwrap();
        assert_eq!(lp, gaussian_logprob(&head, &a, true).unwrap());
    }

    #[test]
    fn polyak_is_exact_blend() {
        let mut b = ExpertBundle::init(small(), 5, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for v in b.critic1.values_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
        let before = b.target1.clone();
        b.polyak(0.005);
        for ((t, &t0), &p) in b.target1.values().iter().zip(before.values()).zip(b.critic1.values()) {
            assert_eq!(*t, (1.0 - 0.005f32) * t0 + 0.005 * p);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let b = ExpertBundle::init(small(), 6, true).unwrap();
        let dir = tempfile::tempdir().unwrap();
        b.save(dir.path(), 7, &[("task".into(), "lid_box".into())]).unwrap();
        let (back, ckpt) = ExpertBundle::load(dir.path()).unwrap();
        assert_eq!(back, b);
        assert_eq!(ckpt.step, 7);
        assert_eq!(ckpt.meta("task"), Some("lid_box"));
    }

    #[test]
    fn wrong_state_width_is_rejected() {
        let b = ExpertBundle::init(small(), 0, false).unwrap();
        assert!(b.gate_decision(&[0.0; 4]).is_err());
        assert!(b.q_min(&[0.0; 5], &[0.0], false).is_err());
    }
}
