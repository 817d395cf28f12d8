//! Every training objective, recorded on a tape.
//!
//! Each loss is generic over the tape scalar so the same code runs in `f32`
//! for training and in `f64` for finite-difference checks. Anything random
//! (actor samples, reparameterization noise) and anything treated as a
//! constant (Bellman targets, advantage weights, expert variances) is computed
//! outside the tape and passed in, which makes every loss a deterministic
//! function of the parameters being differentiated.

use nnkit::heads::{LOG_STD_MAX, LOG_STD_MIN, SQUASH_EPS};
use nnkit::{MlpSpec, ParamVars, ParamVector, Real, Tape, Tensor, Var};

use crate::buffers::Batch;
use crate::env::{ARM_DIM, GRIPPER_MODES};
use crate::error::{Error, Result};
use crate::experts::ExpertBundle;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const LN_2: f64 = std::f64::consts::LN_2;

/// A sampled batch copied into flat row-major arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchData {
    pub rows: usize,
    pub obs_dim: usize,
    pub states: Vec<f32>,
    pub actions: Vec<f32>,
    pub grips: Vec<usize>,
    pub rewards: Vec<f32>,
    pub next_states: Vec<f32>,
    pub dones: Vec<f32>,
}

impl BatchData {
    pub fn from_batch(b: &Batch<'_>, obs_dim: usize) -> Self {
        let rows = b.len();
        let mut d = Self {
            rows,
            obs_dim,
            states: Vec::with_capacity(rows * obs_dim),
            actions: Vec::with_capacity(rows * ARM_DIM),
            grips: Vec::with_capacity(rows),
            rewards: Vec::with_capacity(rows),
            next_states: Vec::with_capacity(rows * obs_dim),
            dones: Vec::with_capacity(rows),
        };
        for t in &b.items {
            d.states.extend_from_slice(&t.state);
            d.actions.extend_from_slice(&t.arm_action);
            d.grips.push(t.gripper_action.index());
            d.rewards.push(t.reward);
            d.next_states.extend_from_slice(&t.next_state);
            d.dones.push(if t.done { 1.0 } else { 0.0 });
        }
        d
    }

    pub fn state_actions(&self) -> Vec<f32> {
        let mut x = Vec::with_capacity(self.rows * (self.obs_dim + ARM_DIM));
        for r in 0..self.rows {
            x.extend_from_slice(&self.states[r * self.obs_dim..(r + 1) * self.obs_dim]);
            x.extend_from_slice(&self.actions[r * ARM_DIM..(r + 1) * ARM_DIM]);
        }
        x
    }

    fn grip_onehot(&self) -> Vec<f32> {
        let mut m = vec![0.0; self.rows * GRIPPER_MODES];
        for (r, &g) in self.grips.iter().enumerate() {
            m[r * GRIPPER_MODES + g] = 1.0;
        }
        m
    }
}

fn constant<T: Real>(tape: &mut Tape<T>, rows: usize, cols: usize, data: &[f32]) -> Var {
    tape.constant(Tensor::from_f32(rows, cols, data))
}

/// Splits an actor output into `(mean, clamped log_std)`.
fn gaussian_parts<T: Real>(tape: &mut Tape<T>, out: Var) -> (Var, Var) {
    let mean = tape.slice_cols(out, 0, ARM_DIM);
    let ls = tape.slice_cols(out, ARM_DIM, ARM_DIM);
    let ls = tape.clamp(ls, LOG_STD_MIN as f64, LOG_STD_MAX as f64);
    (mean, ls)
}

pub struct BcTerms {
    pub mse: Var,
    pub nll: Var,
    pub total: Var,
}

/// Imitation loss: `mean ||tanh(mean(s)) - a||^2` plus `nll_weight` times
/// the Gaussian negative log-likelihood of the (detached) residuals, which
/// trains the log-std head.
pub fn bc_loss<T: Real>(
    tape: &mut Tape<T>,
    spec: &MlpSpec,
    vars: &ParamVars,
    b: &BatchData,
    nll_weight: f64,
) -> BcTerms {
    let x = constant(tape, b.rows, b.obs_dim, &b.states);
    let out = spec.forward_tape(tape, vars, x);
    let (mean, ls) = gaussian_parts(tape, out);
    let pred = tape.tanh(mean);
    let a = constant(tape, b.rows, ARM_DIM, &b.actions);
    let diff = tape.sub(pred, a);
    let sq = tape.square(diff);
    let per_row = tape.sum_cols(sq);
    let mse = tape.mean(per_row);

    let r2 = tape.detach(sq);
    let neg2ls = tape.scale(ls, -2.0);
    let inv_var = tape.exp(neg2ls);
    let z2 = tape.mul(r2, inv_var);
    let half_z2 = tape.scale(z2, 0.5);
    let nll_el = tape.add(half_z2, ls);
    let nll_el = tape.add_scalar(nll_el, 0.5 * LN_2PI);
    let nll_row = tape.sum_cols(nll_el);
    let nll = tape.mean(nll_row);

    let weighted = tape.scale(nll, nll_weight);
    let total = tape.add(mse, weighted);
    BcTerms { mse, nll, total }
}

/// Gripper classification loss: mean negative log-likelihood of the
/// recorded gripper commands.
pub fn dbc_loss<T: Real>(tape: &mut Tape<T>, spec: &MlpSpec, vars: &ParamVars, b: &BatchData) -> Var {
    let x = constant(tape, b.rows, b.obs_dim, &b.states);
    let logits = spec.forward_tape(tape, vars, x);
    let lsm = tape.log_softmax(logits);
    let onehot = constant(tape, b.rows, GRIPPER_MODES, &b.grip_onehot());
    let picked = tape.mul(lsm, onehot);
    let ll = tape.sum_cols(picked);
    let m = tape.mean(ll);
    tape.neg(m)
}

/// Squared Bellman error of one critic against precomputed targets.
pub fn critic_loss<T: Real>(
    tape: &mut Tape<T>,
    spec: &MlpSpec,
    vars: &ParamVars,
    b: &BatchData,
    targets: &[f32],
) -> Var {
    let x = constant(tape, b.rows, b.obs_dim + ARM_DIM, &b.state_actions());
    let q = spec.forward_tape(tape, vars, x);
    let y = constant(tape, b.rows, 1, targets);
    let d = tape.sub(q, y);
    let d2 = tape.square(d);
    tape.mean(d2)
}

/// `tanh(mean + exp(log_std) * eps)` for each row, outside any tape.
pub fn sample_actions(bundle: &ExpertBundle, states: &[f32], rows: usize, eps: &[f32]) -> Result<Vec<f32>> {
    let out = bundle.spec.actor().forward_rows(&bundle.rl_actor, states, rows)?;
    let mut a = Vec::with_capacity(rows * ARM_DIM);
    for r in 0..rows {
        let o = &out[r * 2 * ARM_DIM..(r + 1) * 2 * ARM_DIM];
        for k in 0..ARM_DIM {
            let ls = o[ARM_DIM + k].clamp(LOG_STD_MIN, LOG_STD_MAX);
            let u = o[k] as f64 + (ls as f64).exp() * eps[r * ARM_DIM + k] as f64;
            a.push(u.tanh() as f32);
        }
    }
    Ok(a)
}

fn join_rows(states: &[f32], obs_dim: usize, actions: &[f32], rows: usize) -> Vec<f32> {
    let mut x = Vec::with_capacity(rows * (obs_dim + ARM_DIM));
    for r in 0..rows {
        x.extend_from_slice(&states[r * obs_dim..(r + 1) * obs_dim]);
        x.extend_from_slice(&actions[r * ARM_DIM..(r + 1) * ARM_DIM]);
    }
    x
}

/// `min(Q1, Q2)` per row, from the online or target critics.
pub fn q_min_rows(bundle: &ExpertBundle, states: &[f32], actions: &[f32], rows: usize, targets: bool) -> Result<Vec<f32>> {
    let spec = bundle.spec.critic();
    let x = join_rows(states, bundle.spec.obs_dim, actions, rows);
    let (p1, p2) = if targets {
        (&bundle.target1, &bundle.target2)
    } else {
        (&bundle.critic1, &bundle.critic2)
    };
    let q1 = spec.forward_rows(p1, &x, rows)?;
    let q2 = spec.forward_rows(p2, &x, rows)?;
    Ok(q1.iter().zip(&q2).map(|(a, b)| a.min(*b)).collect())
}

/// Clipped double-Q targets `r + gamma (1 - done) min(Q1', Q2')(s', a')`,
/// with `a'` drawn from the RL actor using `eps` (`rows x ARM_DIM`).
pub fn critic_targets(bundle: &ExpertBundle, b: &BatchData, gamma: f32, eps: &[f32]) -> Result<Vec<f32>> {
    let next_a = sample_actions(bundle, &b.next_states, b.rows, eps)?;
    let q = q_min_rows(bundle, &b.next_states, &next_a, b.rows, true)?;
    let mut y = Vec::with_capacity(b.rows);
    for r in 0..b.rows {
        let v = b.rewards[r] + gamma * (1.0 - b.dones[r]) * q[r];
        if !v.is_finite() {
            return Err(Error::Numerical {
                term: "critic target".into(),
                detail: format!("row {r}: reward {} next-state value {}", b.rewards[r], q[r]),
            });
        }
        y.push(v);
    }
    Ok(y)
}

/// Advantage weights `clip(exp(A / lambda), 0, clip)` with
/// `A = Qmin(s, a) - mean_k Qmin(s, a_k)`, `a_k` drawn from the RL actor
/// (`eps` holds `k * rows * ARM_DIM` values).
pub fn awac_weights(
    bundle: &ExpertBundle,
    b: &BatchData,
    lambda: f32,
    clip: f32,
    samples: usize,
    eps: &[f32],
) -> Result<Vec<f32>> {
    let q_data = q_min_rows(bundle, &b.states, &b.actions, b.rows, false)?;
    let mut baseline = vec![0.0f64; b.rows];
    let chunk = b.rows * ARM_DIM;
    for k in 0..samples {
        let a = sample_actions(bundle, &b.states, b.rows, &eps[k * chunk..(k + 1) * chunk])?;
        let q = q_min_rows(bundle, &b.states, &a, b.rows, false)?;
        for (acc, v) in baseline.iter_mut().zip(q) {
            *acc += v as f64 / samples as f64;
        }
    }
    Ok(q_data
        .iter()
        .zip(&baseline)
        .map(|(&q, &v)| advantage_weight(q as f64 - v, lambda, clip))
        .collect())
}

pub fn advantage_weight(advantage: f64, lambda: f32, clip: f32) -> f32 {
    ((advantage / lambda as f64).exp().clamp(0.0, clip as f64)) as f32
}

/// Advantage-weighted log-likelihood: `-mean(w * log pi(a | s))`, with the
/// squashed-Gaussian density of the recorded actions.
pub fn awac_loss<T: Real>(
    tape: &mut Tape<T>,
    spec: &MlpSpec,
    vars: &ParamVars,
    b: &BatchData,
    weights: &[f32],
) -> Var {
    let x = constant(tape, b.rows, b.obs_dim, &b.states);
    let out = spec.forward_tape(tape, vars, x);
    let (mean, ls) = gaussian_parts(tape, out);
    // Pre-images of the recorded actions and the per-row constant part.
    let mut u = Vec::with_capacity(b.rows * ARM_DIM);
    let mut c = Vec::with_capacity(b.rows);
    for r in 0..b.rows {
        let mut cr = 0.0f64;
        for k in 0..ARM_DIM {
            let a = (b.actions[r * ARM_DIM + k] as f64).clamp(-1.0 + SQUASH_EPS, 1.0 - SQUASH_EPS);
            u.push(a.atanh());
            cr += -0.5 * LN_2PI - (1.0 - a * a).ln();
        }
        c.push(cr);
    }
    let u = tape.constant(Tensor::new(b.rows, ARM_DIM, u.into_iter().map(T::of).collect()));
    let c = tape.constant(Tensor::new(b.rows, 1, c.into_iter().map(T::of).collect()));
    let d = tape.sub(u, mean);
    let neg_ls = tape.neg(ls);
    let inv_std = tape.exp(neg_ls);
    let z = tape.mul(d, inv_std);
    let z2 = tape.square(z);
    let half = tape.scale(z2, -0.5);
    let el = tape.sub(half, ls);
    let row = tape.sum_cols(el);
    let logp = tape.add(row, c);
    let w = constant(tape, b.rows, 1, weights);
    let wl = tape.mul(logp, w);
    let m = tape.mean(wl);
    tape.neg(m)
}

pub struct SacTerms {
    pub total: Var,
    /// Per-row log-density of the reparameterized sample, `[B x 1]`.
    pub logp: Var,
    pub q: Var,
    pub reg: Var,
}

/// Entropy-regularized actor loss with a pull toward the imitation expert:
/// `mean(alpha log pi(a~|s) - Qmin(s, a~) + beta_reg ||tanh(mean(s)) - bc_mode(s)||^2)`,
/// `a~ = tanh(mean + std * eps)`.
#[allow(clippy::too_many_arguments)]
pub fn sac_actor_loss<T: Real>(
    tape: &mut Tape<T>,
    actor: &MlpSpec,
    vars: &ParamVars,
    critic: &MlpSpec,
    critic1: &ParamVector,
    critic2: &ParamVector,
    b: &BatchData,
    eps: &[f32],
    bc_mode: &[f32],
    alpha: f64,
    beta_reg: f64,
) -> SacTerms {
    let x = constant(tape, b.rows, b.obs_dim, &b.states);
    let out = actor.forward_tape(tape, vars, x);
    let (mean, ls) = gaussian_parts(tape, out);
    let e = constant(tape, b.rows, ARM_DIM, eps);
    let std = tape.exp(ls);
    let noise = tape.mul(std, e);
    let u = tape.add(mean, noise);
    let a = tape.tanh(u);

    // log(1 - tanh(u)^2) = 2 (ln 2 - u - softplus(-2u))
    let m2u = tape.scale(u, -2.0);
    let sp = tape.softplus(m2u);
    let u_sp = tape.add(u, sp);
    let inner = tape.neg(u_sp);
    let inner = tape.add_scalar(inner, LN_2);
    let corr = tape.scale(inner, 2.0);
    let base: Vec<T> = eps
        .iter()
        .map(|&v| T::of(-0.5 * (v as f64) * (v as f64) - 0.5 * LN_2PI))
        .collect();
    let base = tape.constant(Tensor::new(b.rows, ARM_DIM, base));
    let el = tape.sub(base, ls);
    let el = tape.sub(el, corr);
    let logp = tape.sum_cols(el);

    let c1 = tape.frozen_params(critic1);
    let c2 = tape.frozen_params(critic2);
    let sa = tape.concat(x, a);
    let q1 = critic.forward_tape(tape, &c1, sa);
    let q2 = critic.forward_tape(tape, &c2, sa);
    let q = tape.min(q1, q2);

    let mode = tape.tanh(mean);
    let target = constant(tape, b.rows, ARM_DIM, bc_mode);
    let gap = tape.sub(mode, target);
    let gap2 = tape.square(gap);
    let reg = tape.sum_cols(gap2);

    let ent = tape.scale(logp, alpha);
    let per = tape.sub(ent, q);
    let reg_w = tape.scale(reg, beta_reg);
    let per = tape.add(per, reg_w);
    let total = tape.mean(per);
    SacTerms { total, logp, q, reg }
}

/// Gradient of the temperature loss `-mean(log_alpha (logp + target))`
/// with respect to `log_alpha`.
pub fn alpha_grad(logp: &[f64], target_entropy: f32) -> f64 {
    -logp.iter().map(|l| l + target_entropy as f64).sum::<f64>() / logp.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateCoefficients {
    pub alpha_spec: f64,
    pub beta_load: f64,
    pub gamma_ent: f64,
}

/// The four weighted gate-loss components and their sum.
pub struct GateTerms {
    pub variance: Var,
    pub specialization: Var,
    pub load: Var,
    pub entropy: Var,
    pub total: Var,
}

/// Gate objective over `[B x 2]` expert variances `sigmas` (`sigma_bc`,
/// `sigma_rl` per row, treated as constants):
///
/// ```text
/// mean(w_bc s_bc + w_rl s_rl)
///   + alpha_spec mean(0.5 - |w_bc - 0.5|)
///   + beta_load ((mean w_bc - 0.5)^2 + (mean w_rl - 0.5)^2)
///   + gamma_ent mean(w_bc ln w_bc + w_rl ln w_rl)
/// ```
pub fn gate_loss<T: Real>(
    tape: &mut Tape<T>,
    spec: &MlpSpec,
    vars: &ParamVars,
    states: &[f32],
    rows: usize,
    sigmas: &[f32],
    coef: GateCoefficients,
) -> Result<GateTerms> {
    if rows < 2 {
        return Err(Error::Contract("gate loss needs a batch of at least 2".into()));
    }
    let x = constant(tape, rows, spec.input_dim, states);
    let logits = spec.forward_tape(tape, vars, x);
    let lsm = tape.log_softmax(logits);
    let w = tape.exp(lsm);

    let s = constant(tape, rows, 2, sigmas);
    let ws = tape.mul(w, s);
    let ws = tape.sum_cols(ws);
    let variance = tape.mean(ws);

    let w_bc = tape.slice_cols(w, 0, 1);
    let dev = tape.add_scalar(w_bc, -0.5);
    let dev = tape.abs(dev);
    let spec_el = tape.neg(dev);
    let spec_el = tape.add_scalar(spec_el, 0.5);
    let spec_m = tape.mean(spec_el);
    let specialization = tape.scale(spec_m, coef.alpha_spec);

    let mw = tape.mean_rows(w);
    let mdev = tape.add_scalar(mw, -0.5);
    let mdev = tape.square(mdev);
    let lb = tape.sum_cols(mdev);
    let load = tape.scale(lb, coef.beta_load);

    let wlw = tape.mul(w, lsm);
    let wlw = tape.sum_cols(wlw);
    let ent_m = tape.mean(wlw);
    let entropy = tape.scale(ent_m, coef.gamma_ent);

    let t = tape.add(variance, specialization);
    let t = tape.add(t, load);
    let total = tape.add(t, entropy);
    Ok(GateTerms {
        variance,
        specialization,
        load,
        entropy,
        total,
    })
}

/// `r + gamma (1 - done) max_g Q'(s', g)` from the gripper target network.
pub fn gripper_q_targets(bundle: &ExpertBundle, b: &BatchData, gamma: f32) -> Result<Vec<f32>> {
    let (_, target) = bundle
        .gripper_q
        .as_ref()
        .ok_or_else(|| Error::Contract("bundle has no gripper Q-network".into()))?;
    let q = bundle.spec.gripper().forward_rows(target, &b.next_states, b.rows)?;
    Ok((0..b.rows)
        .map(|r| {
            let best = q[r * GRIPPER_MODES..(r + 1) * GRIPPER_MODES]
                .iter()
                .copied()
                .fold(f32::NEG_INFINITY, f32::max);
            b.rewards[r] + gamma * (1.0 - b.dones[r]) * best
        })
        .collect())
}

/// Squared TD error of the gripper Q-network on the recorded commands.
pub fn gripper_q_loss<T: Real>(
    tape: &mut Tape<T>,
    spec: &MlpSpec,
    vars: &ParamVars,
    b: &BatchData,
    targets: &[f32],
) -> Var {
    let x = constant(tape, b.rows, b.obs_dim, &b.states);
    let q = spec.forward_tape(tape, vars, x);
    let onehot = constant(tape, b.rows, GRIPPER_MODES, &b.grip_onehot());
    let qa = tape.mul(q, onehot);
    let qa = tape.sum_cols(qa);
    let y = constant(tape, b.rows, 1, targets);
    let d = tape.sub(qa, y);
    let d2 = tape.square(d);
    tape.mean(d2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::GripperMode;
    use nnkit::{grad, Activation};

    fn batch(rows: usize, obs: usize) -> BatchData {
        let f = |i: usize| ((i * 37 % 17) as f32 - 8.0) / 10.0;
        BatchData {
            rows,
            obs_dim: obs,
            states: (0..rows * obs).map(f).collect(),
            actions: (0..rows * ARM_DIM).map(|i| f(i + 3) * 0.9).collect(),
            grips: (0..rows).map(|r| r % 3).collect(),
            rewards: (0..rows).map(|r| (r % 2) as f32).collect(),
            next_states: (0..rows * obs).map(|i| f(i + 5)).collect(),
            dones: (0..rows).map(|r| (r % 2) as f32).collect(),
        }
    }

    #[test]
    fn bc_mse_of_a_known_residual() {
        // Zero network: prediction tanh(0) = 0, so the residual is -a.
        let spec = MlpSpec::new(3, vec![4], Activation::Relu, 4);
        let p = ParamVector::zeros(spec.layout());
        let b = BatchData {
            rows: 1,
            obs_dim: 3,
            states: vec![0.1, 0.2, 0.3],
            actions: vec![-0.3, 0.4],
            grips: vec![1],
            rewards: vec![0.0],
            next_states: vec![0.0; 3],
            dones: vec![0.0],
        };
        let mut tape = Tape::<f64>::new();
        let vars = tape.params(&p);
        let t = bc_loss(&mut tape, &spec, &vars, &b, 0.1);
        assert!((tape.scalar(t.mse) - 0.25).abs() < 1e-7);
        // log_std = 0: nll = sum(0.5 r^2) + ln(2 pi) = 0.125 + 1.8379
        assert!((tape.scalar(t.nll) - (0.125 + LN_2PI)).abs() < 1e-6);
    }

    #[test]
    fn dbc_uniform_and_confident_logits() {
        let spec = MlpSpec::new(2, vec![3], Activation::Relu, 3);
        let mut p = ParamVector::zeros(spec.layout());
        let b = BatchData {
            rows: 2,
            obs_dim: 2,
            states: vec![0.5, 0.5, 1.0, 0.0],
            actions: vec![0.0; 4],
            grips: vec![GripperMode::Hold.index(); 2],
            rewards: vec![0.0; 2],
            next_states: vec![0.0; 4],
            dones: vec![0.0; 2],
        };
        let (l, _) = grad::<f64, _>(&p, |tape, vars| dbc_loss(tape, &spec, vars, &b)).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-9);
        // Output bias (+-20) makes the hold logit dominate.
        let n = p.layout().len();
        p.tensor_mut(n - 1).copy_from_slice(&[-20.0, 20.0, -20.0]);
        let (l, _) = grad::<f64, _>(&p, |tape, vars| dbc_loss(tape, &spec, vars, &b)).unwrap();
        assert!(l < 1e-8, "{l}");
    }

    #[test]
    fn awac_weight_arithmetic() {
        assert_eq!(advantage_weight(0.0, 1.0, 20.0), 1.0);
        assert!((advantage_weight(1.0, 0.5, 20.0) as f64 - 2f64.exp()).abs() < 1e-5);
        assert!((advantage_weight(-10.0, 1.0, 20.0) as f64 - (-10f64).exp()).abs() < 1e-9);
        assert_eq!(advantage_weight(100.0, 1.0, 20.0), 20.0);
    }

    #[test]
    fn temperature_gradient_sign() {
        // Entropy above target (logp very negative) -> lower alpha.
        assert!(alpha_grad(&[-5.0, -6.0], -2.0) > 0.0);
        assert!(alpha_grad(&[3.0], -2.0) < 0.0);
    }

    #[test]
    fn gate_rejects_single_row() {
        let spec = MlpSpec::new(2, vec![3], Activation::Relu, 2);
        let p = ParamVector::zeros(spec.layout());
        let mut tape = Tape::<f64>::new();
        let vars = tape.params(&p);
        let coef = GateCoefficients {
            alpha_spec: 0.1,
            beta_load: 0.05,
            gamma_ent: 0.01,
        };
        assert!(gate_loss(&mut tape, &spec, &vars, &[0.0, 0.0], 1, &[1.0, 1.0], coef).is_err());
    }

    #[test]
    fn terminal_target_is_reward() {
        let spec = crate::experts::BundleSpec {
            obs_dim: 3,
            hidden: vec![4],
            gate_hidden: vec![4],
        };
        let bundle = ExpertBundle::init(spec, 0, false).unwrap();
        let b = batch(4, 3);
        let y = critic_targets(&bundle, &b, 0.9, &[0.0; 8]).unwrap();
        for r in 0..4 {
            if b.dones[r] == 1.0 {
                assert_eq!(y[r], b.rewards[r]);
            }
        }
    }
}
