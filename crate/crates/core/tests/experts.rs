//! Expert heads, critics and arbitration checked against direct oracles.

use gatelab::env::ARM_DIM;
use gatelab::experts::{Arbitration, BundleSpec, ExpertBundle};
use gatelab::training::losses::{self, BatchData};
use nnkit::{gaussian_logprob, ParamVector, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const OBS: usize = 6;

fn bundle(seed: u64) -> ExpertBundle {
    let mut spec = BundleSpec::new(OBS);
    spec.hidden = vec![16, 16];
    spec.gate_hidden = vec![8];
    ExpertBundle::init(spec, seed, false).unwrap()
}

fn random_state<R: Rng>(rng: &mut R) -> Vec<f32> {
    (0..OBS).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Sets an actor's output to `[mean | log_std]` on every state.
fn constant_actor(p: &mut ParamVector, mean: &[f32], log_std: &[f32]) {
    let n = p.layout().len();
    p.tensor_mut(n - 2).fill(0.0);
    let bias = p.tensor_mut(n - 1);
    bias[..ARM_DIM].copy_from_slice(mean);
    bias[ARM_DIM..].copy_from_slice(log_std);
}

/// `E[tanh(m + s z)]` for standard normal `z`, by composite Simpson's rule
/// on `[-10, 10]`.
fn tanh_pushforward_mean(m: f64, s: f64) -> f64 {
    let n = 20_000;
    let (a, b) = (-10.0, 10.0);
    let h = (b - a) / n as f64;
    let f = |z: f64| (m + s * z).tanh() * (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut acc = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + i as f64 * h);
    }
    acc * h / 3.0
}

#[test]
fn sample_mean_matches_the_tanh_pushforward() {
    let mut b = bundle(1);
    let means = [0.8f32, -1.7];
    let ln_std = (0.1f32).ln();
    constant_actor(&mut b.rl_actor, &means, &[ln_std; ARM_DIM]);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s = random_state(&mut rng);
    let n = 10_000;
    let mut sum = [0.0f64; ARM_DIM];
    for _ in 0..n {
        let (a, lp, sigma) = b.rl_act(&s, true, &mut rng).unwrap();
        let head = b.rl_head(&s).unwrap();
        assert_eq!(lp, gaussian_logprob(&head, &a, true).unwrap());
        assert!((sigma - 0.01).abs() < 1e-6);
        for k in 0..ARM_DIM {
            sum[k] += a[k] as f64;
        }
    }
    for k in 0..ARM_DIM {
        let mc = sum[k] / n as f64;
        let want = tanh_pushforward_mean(means[k] as f64, 0.1);
        assert!((mc - want).abs() <= 0.02, "dim {k}: sample mean {mc} vs {want}");
    }
}

#[test]
fn q_min_never_exceeds_either_head() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for k in 0..1000 {
        let b = bundle(1000 + k % 10);
        let s = random_state(&mut rng);
        let a: Vec<f32> = (0..ARM_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
        for targets in [false, true] {
            let (q1, q2) = b.q_pair(&s, &a, targets).unwrap();
            let m = b.q_min(&s, &a, targets).unwrap();
            assert!(m <= q1 && m <= q2 && (m == q1 || m == q2));
        }
    }
}

#[test]
fn gripper_command_ignores_the_gate() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let b = bundle(5);
    let spec = b.spec.gate();
    let gates: Vec<ParamVector> = (0..3).map(|_| spec.init(&mut rng, 3.0).unwrap()).collect();
    let mut variants = vec![b.clone()];
    for g in gates {
        let mut v = b.clone();
        v.gate = g;
        variants.push(v);
    }
    for _ in 0..1000 {
        let s = random_state(&mut rng);
        let want = b.dbc_act(&s).unwrap();
        for v in &variants {
            for arb in [Arbitration::Gate, Arbitration::AlwaysBc, Arbitration::AlwaysRl] {
                let (_, g, _) = v.compose_action(&s, false, arb, &mut rng).unwrap();
                assert_eq!(g, want);
            }
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[test]
fn regularizer_share_of_the_actor_gradient_grows_with_its_weight() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let b = bundle(7);
    let rows = 8;
    let states: Vec<f32> = (0..rows).flat_map(|_| random_state(&mut rng)).collect();
    let batch = BatchData {
        rows,
        obs_dim: OBS,
        next_states: states.clone(),
        states,
        actions: vec![0.0; rows * ARM_DIM],
        grips: vec![0; rows],
        rewards: vec![0.0; rows],
        dones: vec![0.0; rows],
    };
    let eps: Vec<f32> = (0..rows * ARM_DIM).map(|_| rng.random_range(-2.0..2.0)).collect();
    let bc_mode: Vec<f32> = (0..rows * ARM_DIM).map(|_| rng.random_range(-0.9..0.9)).collect();
    let (actor, critic) = (b.spec.actor(), b.spec.critic());
    let grad_at = |beta: f64| {
        let mut t = Tape::<f64>::new();
        let v = t.params(&b.rl_actor);
        let l = losses::sac_actor_loss(&mut t, &actor, &v, &critic, &b.critic1, &b.critic2, &batch, &eps, &bc_mode, 0.2, beta);
        let g = t.backward(l.total);
        g.collect_f64(&v)
    };
    let rest = grad_at(0.0);
    let unit: Vec<f64> = grad_at(1.0).iter().zip(&rest).map(|(a, r)| a - r).collect();
    let (rest_n, unit_n) = (norm(&rest), norm(&unit));
    assert!(rest_n > 0.0 && unit_n > 0.0);
    let mut last = -1.0;
    for beta in [0.0, 0.1, 0.5, 1.0, 2.0, 5.0, 10.0] {
        let total = grad_at(beta);
        let reg: Vec<f64> = total.iter().zip(&rest).map(|(a, r)| a - r).collect();
        // The regularizer enters linearly, so its gradient is beta times the unit one.
        for (r, u) in reg.iter().zip(&unit) {
            assert!((r - beta * u).abs() <= 1e-9 * (1.0 + (beta * u).abs()));
        }
        let share = norm(&reg) / (norm(&reg) + rest_n);
        assert!(share > last, "beta {beta}: share {share} after {last}");
        last = share;
    }
    assert!(last > 0.5, "share at the largest weight {last}");
}
