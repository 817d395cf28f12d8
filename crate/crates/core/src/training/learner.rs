use nnkit::{grad, Adam, AdamConfig, ParamVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::losses::{self, BatchData, GateCoefficients};
use super::RunConfig;
use crate::buffers::BufferSet;
use crate::env::ARM_DIM;
use crate::error::{Error, Result};
use crate::experts::ExpertBundle;

/// Loss values of one update step. Terms that were not updated are `None`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub critic: Option<f64>,
    pub actor: Option<f64>,
    pub bc: Option<f64>,
    pub dbc: Option<f64>,
    pub gate: Option<f64>,
    pub alpha: Option<f64>,
    pub gripper_q: Option<f64>,
}

struct Optimizers {
    bc: Adam,
    rl: Adam,
    critic1: Adam,
    critic2: Adam,
    dbc: Adam,
    gate: Adam,
    alpha: Adam,
    gripper_q: Option<Adam>,
}

/// Owns the parameters and optimizer state and performs update steps.
pub struct Learner {
    pub bundle: ExpertBundle,
    cfg: RunConfig,
    opt: Optimizers,
    rng: ChaCha8Rng,
    failures: u32,
    pub updates: u64,
    pub skipped: u64,
}

const MAX_CONSECUTIVE_FAILURES: u32 = 3;

fn normals<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

fn apply(opt: &mut Adam, params: &mut ParamVector, g: &ParamVector, lr: f32) -> Result<()> {
    opt.step(params.values_mut(), g.values(), lr)?;
    Ok(())
}

impl Learner {
    pub fn new(bundle: ExpertBundle, cfg: &RunConfig) -> Self {
        let a = AdamConfig::default();
        let opt = Optimizers {
            bc: Adam::new(bundle.bc_actor.len(), a),
            rl: Adam::new(bundle.rl_actor.len(), a),
            critic1: Adam::new(bundle.critic1.len(), a),
            critic2: Adam::new(bundle.critic2.len(), a),
            dbc: Adam::new(bundle.dbc.len(), a),
            gate: Adam::new(bundle.gate.len(), a),
            alpha: Adam::new(1, a),
            gripper_q: bundle.gripper_q.as_ref().map(|(q, _)| Adam::new(q.len(), a)),
        };
        Self {
            bundle,
            cfg: cfg.clone(),
            opt,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x1ea2_7e2),
            failures: 0,
            updates: 0,
            skipped: 0,
        }
    }

    pub fn into_bundle(self) -> ExpertBundle {
        self.bundle
    }

    /// Runs `f`; a numerical failure skips the step, three in a row abort.
    fn guarded<F>(&mut self, f: F) -> Result<Option<StepLosses>>
    where
        F: FnOnce(&mut Self) -> Result<StepLosses>,
    {
        let snapshot = self.bundle.clone();
        match f(self) {
            Ok(l) => {
                self.failures = 0;
                self.updates += 1;
                Ok(Some(l))
            }
            Err(e @ (Error::Numerical { .. } | Error::Nn(nnkit::NnError::Numerical { .. }))) => {
                self.bundle = snapshot;
                self.failures += 1;
                self.skipped += 1;
                log::warn!("update skipped: {e}");
                if self.failures >= MAX_CONSECUTIVE_FAILURES {
                    return Err(Error::Numerical {
                        term: "training".into(),
                        detail: format!("{} consecutive non-finite updates; last: {e}", self.failures),
                    });
                }
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }

    fn critic_update(&mut self, b: &BatchData) -> Result<f64> {
        let eps = normals(&mut self.rng, b.rows * ARM_DIM);
        let y = losses::critic_targets(&self.bundle, b, self.cfg.gamma, &eps)?;
        let spec = self.bundle.spec.critic();
        let (l1, g1) = grad::<f32, _>(&self.bundle.critic1, |t, v| losses::critic_loss(t, &spec, v, b, &y))?;
        let (l2, g2) = grad::<f32, _>(&self.bundle.critic2, |t, v| losses::critic_loss(t, &spec, v, b, &y))?;
        let lr = self.cfg.lr.critic;
        apply(&mut self.opt.critic1, &mut self.bundle.critic1, &g1, lr)?;
        apply(&mut self.opt.critic2, &mut self.bundle.critic2, &g2, lr)?;
        Ok(0.5 * (l1 + l2))
    }

    fn bc_update(&mut self, b: &BatchData) -> Result<f64> {
        let spec = self.bundle.spec.actor();
        let w = self.cfg.bc_nll_weight as f64;
        let (l, g) = grad::<f32, _>(&self.bundle.bc_actor, |t, v| losses::bc_loss(t, &spec, v, b, w).total)?;
        apply(&mut self.opt.bc, &mut self.bundle.bc_actor, &g, self.cfg.lr.bc)?;
        Ok(l)
    }

    fn dbc_update(&mut self, b: &BatchData) -> Result<f64> {
        let spec = self.bundle.spec.gripper();
        let (l, g) = grad::<f32, _>(&self.bundle.dbc, |t, v| losses::dbc_loss(t, &spec, v, b))?;
        apply(&mut self.opt.dbc, &mut self.bundle.dbc, &g, self.cfg.lr.dbc)?;
        Ok(l)
    }

    fn awac_update(&mut self, b: &BatchData) -> Result<f64> {
        let k = self.cfg.awac_samples;
        let eps = normals(&mut self.rng, k * b.rows * ARM_DIM);
        let w = losses::awac_weights(&self.bundle, b, self.cfg.awac_lambda, self.cfg.awac_clip, k, &eps)?;
        let spec = self.bundle.spec.actor();
        let (l, g) = grad::<f32, _>(&self.bundle.rl_actor, |t, v| losses::awac_loss(t, &spec, v, b, &w))?;
        apply(&mut self.opt.rl, &mut self.bundle.rl_actor, &g, self.cfg.lr.rl_actor)?;
        Ok(l)
    }

    /// Actor step and temperature step; returns `(actor loss, alpha)`.
    fn sac_update(&mut self, b: &BatchData) -> Result<(f64, f64)> {
        let eps = normals(&mut self.rng, b.rows * ARM_DIM);
        let bc_out = self.bundle.spec.actor().forward_rows(&self.bundle.bc_actor, &b.states, b.rows)?;
        let bc_mode: Vec<f32> = (0..b.rows)
            .flat_map(|r| (0..ARM_DIM).map(move |k| (r, k)))
            .map(|(r, k)| bc_out[r * 2 * ARM_DIM + k].tanh())
            .collect();
        let alpha = (self.bundle.alpha_log as f64).exp();
        let beta = self.cfg.effective_beta_reg() as f64;
        let actor = self.bundle.spec.actor();
        let critic = self.bundle.spec.critic();
        let (c1, c2) = (&self.bundle.critic1, &self.bundle.critic2);
        let mut logp = Vec::new();
        let (l, g) = grad::<f32, _>(&self.bundle.rl_actor, |t, v| {
            let terms = losses::sac_actor_loss(t, &actor, v, &critic, c1, c2, b, &eps, &bc_mode, alpha, beta);
            logp = t.value(terms.logp).data.iter().map(|&x| x as f64).collect();
            terms.total
        })?;
        apply(&mut self.opt.rl, &mut self.bundle.rl_actor, &g, self.cfg.lr.rl_actor)?;
        let ga = losses::alpha_grad(&logp, self.cfg.target_entropy) as f32;
        let mut la = [self.bundle.alpha_log];
        self.opt.alpha.step(&mut la, &[ga], self.cfg.lr.alpha)?;
        self.bundle.alpha_log = la[0];
        Ok((l, (la[0] as f64).exp()))
    }

    fn gate_update(&mut self, b: &BatchData) -> Result<f64> {
        let actor = self.bundle.spec.actor();
        let bc = actor.forward_rows(&self.bundle.bc_actor, &b.states, b.rows)?;
        let rl = actor.forward_rows(&self.bundle.rl_actor, &b.states, b.rows)?;
        let sigma = |out: &[f32], r: usize| {
            let ls = &out[r * 2 * ARM_DIM + ARM_DIM..(r + 1) * 2 * ARM_DIM];
            let s: f64 = ls
                .iter()
                .map(|&l| (2.0 * l.clamp(nnkit::heads::LOG_STD_MIN, nnkit::heads::LOG_STD_MAX) as f64).exp())
                .sum();
            (s / ARM_DIM as f64) as f32
        };
        let sigmas: Vec<f32> = (0..b.rows).flat_map(|r| [sigma(&bc, r), sigma(&rl, r)]).collect();
        let coef = GateCoefficients {
            alpha_spec: self.cfg.alpha_spec as f64,
            beta_load: self.cfg.beta_load as f64,
            gamma_ent: self.cfg.gamma_ent as f64,
        };
        let spec = self.bundle.spec.gate();
        let mut err = None;
        let (l, g) = grad::<f32, _>(&self.bundle.gate, |t, v| {
            match losses::gate_loss(t, &spec, v, &b.states, b.rows, &sigmas, coef) {
                Ok(terms) => terms.total,
                Err(e) => {
                    err = Some(e);
                    t.constant(nnkit::Tensor::scalar(0.0))
                }
            }
        })?;
        if let Some(e) = err {
            return Err(e);
        }
        apply(&mut self.opt.gate, &mut self.bundle.gate, &g, self.cfg.lr.gate)?;
        Ok(l)
    }

    fn gripper_q_update(&mut self, b: &BatchData) -> Result<f64> {
        let y = losses::gripper_q_targets(&self.bundle, b, self.cfg.gamma)?;
        let spec = self.bundle.spec.gripper();
        let (q, _) = self.bundle.gripper_q.as_mut().expect("checked by caller");
        let (l, g) = grad::<f32, _>(q, |t, v| losses::gripper_q_loss(t, &spec, v, b, &y))?;
        let opt = self.opt.gripper_q.as_mut().expect("optimizer exists with network");
        opt.step(q.values_mut(), g.values(), self.cfg.lr.critic)?;
        Ok(l)
    }

    /// One offline iteration on demonstration data: critic, advantage-weighted
    /// actor, imitation, gripper classifier, target update. The gate is left
    /// untouched.
    pub fn pretrain_step(&mut self, buffers: &BufferSet) -> Result<Option<StepLosses>> {
        self.guarded(|me| {
            let n = me.cfg.batch_size;
            let demo = &buffers.demo;
            if demo.is_empty() {
                return Err(Error::Config("pretraining needs demonstrations".into()));
            }
            let items: Vec<_> = (0..n).map(|_| demo.get(me.rng.random_range(0..demo.len()))).collect();
            let batch = crate::buffers::Batch {
                origins: vec![crate::buffers::Origin::Demo; n],
                items,
            };
            let b = BatchData::from_batch(&batch, buffers.obs_dim());
            let mut l = StepLosses {
                critic: Some(me.critic_update(&b)?),
                actor: Some(me.awac_update(&b)?),
                bc: Some(me.bc_update(&b)?),
                dbc: Some(me.dbc_update(&b)?),
                ..Default::default()
            };
            if me.bundle.gripper_q.is_some() {
                l.gripper_q = Some(me.gripper_q_update(&b)?);
            }
            me.bundle.polyak(me.cfg.tau);
            Ok(l)
        })
    }

    /// One online iteration: critic and regularized actor on the replay/demo
    /// mix, imitation, gripper classifier and gate on the success/demo mix,
    /// temperature, target update.
    pub fn online_step(&mut self, buffers: &BufferSet) -> Result<Option<StepLosses>> {
        self.guarded(|me| {
            let n = me.cfg.batch_size;
            let rl = BatchData::from_batch(&buffers.sample_rl(n, &mut me.rng), buffers.obs_dim());
            let bc = BatchData::from_batch(&buffers.sample_bc(n, &mut me.rng), buffers.obs_dim());
            if rl.rows == 0 || bc.rows == 0 {
                return Err(Error::Buffer("no data to train on".into()));
            }
            let critic = me.critic_update(&rl)?;
            let (actor, alpha) = me.sac_update(&rl)?;
            let mut l = StepLosses {
                critic: Some(critic),
                actor: Some(actor),
                alpha: Some(alpha),
                bc: Some(me.bc_update(&bc)?),
                dbc: Some(me.dbc_update(&bc)?),
                gate: Some(me.gate_update(&bc)?),
                gripper_q: None,
            };
            if me.bundle.gripper_q.is_some() {
                l.gripper_q = Some(me.gripper_q_update(&rl)?);
            }
            me.bundle.polyak(me.cfg.tau);
            Ok(l)
        })
    }
}
