//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any fails. The training arms use
//! `configs/acceptance.toml`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use gatelab::buffers::{BufferSet, Origin, Source, Transition};
use gatelab::env::{GripperMode, TaskId, ARM_DIM, GRIPPER_MODES};
use gatelab::experts::{gate_weights, select, Arbitration, Expert};
use gatelab::oracle::{OraclePolicy, ScriptedIntervention};
use gatelab::training::losses::{self, BatchData, GateCoefficients};
use gatelab::training::*;
use nnkit::{Activation, MlpSpec, ParamVars, ParamVector, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EVAL_EPISODES: usize = 50;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn preset() -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/acceptance.toml");
    RunConfig::load(&path).expect("acceptance preset loads")
}

// Gradients.

const GRID: f32 = 1.0 / (1 << 20) as f32;
const STEP: f32 = 1.0 / (1 << 13) as f32;

fn net<R: Rng>(rng: &mut R, input: usize, output: usize, scale: f32) -> (MlpSpec, ParamVector) {
    let spec = MlpSpec::new(input, vec![6, 5], Activation::Tanh, output);
    let mut p = spec.init(rng, scale).unwrap();
    for v in p.values_mut() {
        *v = (*v / GRID).round() * GRID;
    }
    (spec, p)
}

fn value_and_grad(p: &ParamVector, f: &dyn Fn(&mut Tape<f64>, &ParamVars) -> Var) -> (f64, Vec<f64>) {
    let mut tape = Tape::<f64>::new();
    let vars = tape.params(p);
    let loss = f(&mut tape, &vars);
    let value = tape.scalar(loss);
    (value, tape.backward(loss).collect_f64(&vars))
}

/// Worst relative error of the analytic gradient against fourth-order
/// central differences; `None` if any coordinate misses `1e-4`.
fn fd_error(p: &ParamVector, f: &dyn Fn(&mut Tape<f64>, &ParamVars) -> Var) -> Option<f64> {
    let (_, analytic) = value_and_grad(p, f);
    let at = |i: usize, k: f32| {
        let mut q = p.clone();
        q.values_mut()[i] += k * STEP;
        value_and_grad(&q, f).0
    };
    let h = STEP as f64;
    let mut worst = 0.0f64;
    for (i, &an) in analytic.iter().enumerate() {
        let fd = (8.0 * (at(i, 1.0) - at(i, -1.0)) - (at(i, 2.0) - at(i, -2.0))) / (12.0 * h);
        let (err, scale) = ((fd - an).abs(), fd.abs().max(an.abs()));
        if err > 1e-4 * scale + 1e-10 {
            return None;
        }
        if scale > 1e-6 {
            worst = worst.max(err / scale);
        }
    }
    Some(worst)
}

fn random_batch<R: Rng>(rng: &mut R, rows: usize, obs_dim: usize) -> BatchData {
    let mut u = |n: usize, lo: f32, hi: f32| (0..n).map(|_| rng.random_range(lo..hi)).collect::<Vec<f32>>();
    BatchData {
        rows,
        obs_dim,
        states: u(rows * obs_dim, -1.0, 1.0),
        next_states: u(rows * obs_dim, -1.0, 1.0),
        actions: u(rows * ARM_DIM, -0.9, 0.9),
        grips: (0..rows).map(|r| r % GRIPPER_MODES).collect(),
        rewards: (0..rows).map(|r| (r % 2) as f32).collect(),
        dones: (0..rows).map(|r| (r == rows - 1) as u8 as f32).collect(),
    }
}

fn gradients() -> Outcome {
    let mut worst = 0.0f64;
    let mut failed = Vec::new();
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let (d, n) = (rng.random_range(3..=6), rng.random_range(2..=4));
        let b = random_batch(&mut rng, n, d);
        let mut vals = |n: usize, lo: f32, hi: f32| (0..n).map(|_| rng.random_range(lo..hi)).collect::<Vec<f32>>();
        let (y, w, sig) = (vals(n, -1.0, 2.0), vals(n, 0.0, 5.0), vals(2 * n, 0.01, 1.0));
        let (eps, mode) = (vals(n * ARM_DIM, -2.0, 2.0), vals(n * ARM_DIM, -0.9, 0.9));
        let (actor, pa) = net(&mut rng, d, 2 * ARM_DIM, 0.5);
        let (critic, pc) = net(&mut rng, d + ARM_DIM, 1, 1.0);
        let (_, pc2) = net(&mut rng, d + ARM_DIM, 1, 1.0);
        let (cls, pg) = net(&mut rng, d, GRIPPER_MODES, 1.0);
        let (gate, pgate) = net(&mut rng, d, 2, 1.0);
        let coef = GateCoefficients {
            alpha_spec: 0.3,
            beta_load: 0.5,
            gamma_ent: 0.2,
        };
        type Loss<'a> = Box<dyn Fn(&mut Tape<f64>, &ParamVars) -> Var + 'a>;
        let cases: Vec<(&str, &ParamVector, Loss)> = vec![
            ("bc mse", &pa, Box::new(|t, v| losses::bc_loss(t, &actor, v, &b, 0.1).mse)),
            ("dbc", &pg, Box::new(|t, v| losses::dbc_loss(t, &cls, v, &b))),
            ("critic", &pc, Box::new(|t, v| losses::critic_loss(t, &critic, v, &b, &y))),
            ("awac", &pa, Box::new(|t, v| losses::awac_loss(t, &actor, v, &b, &w))),
            (
                "sac actor",
                &pa,
                Box::new(|t, v| losses::sac_actor_loss(t, &actor, v, &critic, &pc, &pc2, &b, &eps, &mode, 0.2, 0.7).total),
            ),
            ("gate", &pgate, Box::new(|t, v| losses::gate_loss(t, &gate, v, &b.states, n, &sig, coef).unwrap().total)),
            ("gripper q", &pg, Box::new(|t, v| losses::gripper_q_loss(t, &cls, v, &b, &y))),
        ];
        for (name, p, f) in &cases {
            match fd_error(p, f.as_ref()) {
                Some(e) => worst = worst.max(e),
                None => failed.push(*name),
            }
        }
    }
    outcome(
        failed.is_empty(),
        format!("7 losses x 3 instances, worst relative error {worst:.2e}, failing: {failed:?}"),
    )
}

// Gate algebra.

fn gate_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst_sum = 0.0f64;
    let mut worst_direct = 0.0f64;
    for _ in 0..500 {
        let (obs, rows) = (rng.random_range(2..=8), rng.random_range(2..=16));
        let spec = MlpSpec::new(obs, vec![8], Activation::Relu, 2);
        let scale = rng.random_range(0.1..3.0);
        let p = spec.init(&mut rng, scale).unwrap();
        let states: Vec<f32> = (0..rows * obs).map(|_| rng.random_range(-2.0..2.0)).collect();
        let sigmas: Vec<f32> = (0..2 * rows).map(|_| rng.random_range(1e-4..3.0)).collect();
        let c = GateCoefficients {
            alpha_spec: rng.random_range(0.0..2.0),
            beta_load: rng.random_range(0.0..2.0),
            gamma_ent: rng.random_range(0.0..2.0),
        };
        let mut t = Tape::<f64>::new();
        let v = t.params(&p);
        let g = losses::gate_loss(&mut t, &spec, &v, &states, rows, &sigmas, c).unwrap();
        let got = [g.variance, g.specialization, g.load, g.entropy].map(|x| t.scalar(x));
        worst_sum = worst_sum.max((got.iter().sum::<f64>() - t.scalar(g.total)).abs());

        let logits = spec.forward_rows(&p, &states, rows).unwrap();
        let (mut var, mut sp, mut ent, mut mean) = (0.0, 0.0, 0.0, 0.0);
        for r in 0..rows {
            let w = gate_weights(&logits[2 * r..2 * r + 2]).0 as f64;
            let q = 1.0 - w;
            var += w * sigmas[2 * r] as f64 + q * sigmas[2 * r + 1] as f64;
            sp += 0.5 - (w - 0.5).abs();
            let xlx = |x: f64| if x > 0.0 { x * x.ln() } else { 0.0 };
            ent += xlx(w) + xlx(q);
            mean += w;
        }
        let n = rows as f64;
        let m = mean / n;
        let direct = [
            var / n,
            c.alpha_spec * sp / n,
            c.beta_load * ((m - 0.5).powi(2) + (0.5 - m).powi(2)),
            c.gamma_ent * ent / n,
        ];
        for (a, b) in got.iter().zip(direct) {
            worst_direct = worst_direct.max((a - b).abs());
        }
    }
    let mut selection_ok = true;
    for _ in 0..10_000 {
        let l = [rng.random_range(-20.0..20.0f32), rng.random_range(-20.0..20.0f32)];
        let (wb, wr) = gate_weights(&l);
        let want = if wb > wr { Expert::Bc } else { Expert::Rl };
        selection_ok &= (wb + wr - 1.0).abs() < 1e-6 && select(wb, wr) == want;
    }
    outcome(
        worst_sum <= 1e-6 && worst_direct <= 1e-5 && selection_ok,
        format!(
            "terms sum to total within {worst_sum:.1e}, match the direct formula within {worst_direct:.1e}, selection consistent: {selection_ok}"
        ),
    )
}

// Buffers.

fn transition(id: usize, last: bool, reward: f32, source: Source) -> Transition {
    Transition {
        state: vec![id as f32, 0.0],
        arm_action: vec![0.0; ARM_DIM],
        gripper_action: GripperMode::Hold,
        reward,
        next_state: vec![id as f32 + 1.0, 0.0],
        done: last,
        intervened: source == Source::OnlineIntervention,
        source,
    }
}

fn episode(first: usize, mask: &[bool], success: bool, online: bool) -> Vec<Transition> {
    let n = mask.len();
    (0..n)
        .map(|i| {
            let source = match (online, mask[i]) {
                (false, _) => Source::OfflineDemo,
                (true, true) => Source::OnlineIntervention,
                (true, false) => Source::OnlinePolicy,
            };
            transition(first + i, i == n - 1, if success && i == n - 1 { 1.0 } else { 0.0 }, source)
        })
        .collect()
}

fn buffers() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut b = BufferSet::new(2);
    let demos: Vec<_> = (0..3).map(|k| episode(1000 * k, &[false; 6], true, false)).collect();
    b.load_offline_demos(&demos).unwrap();
    let (mut want_demo, mut want_success, mut want_replay) = (18, 18, 0);
    let mut routed = true;
    for k in 0..40 {
        let len = rng.random_range(1..12);
        let mask: Vec<bool> = (0..len).map(|_| rng.random_bool(0.3)).collect();
        let ok = rng.random_bool(0.5);
        let report = b.ingest_episode(&episode(10_000 + 100 * k, &mask, ok, true)).unwrap();
        let iv = mask.iter().filter(|&&m| m).count();
        want_demo += iv;
        want_replay += len;
        if ok {
            want_success += len;
        }
        routed &= report.to_demo == iv && report.to_replay == len && report.to_success == if ok { len } else { 0 };
    }
    routed &= b.demo.len() == want_demo && b.success.len() == want_success && b.replay.len() == want_replay;
    routed &= b.demo.iter().all(|t| t.source != Source::OnlinePolicy);
    routed &= b.replay.iter().all(|t| t.source != Source::OfflineDemo);

    let draws = 100_000;
    let bc = b.sample_bc(draws, &mut rng).count(Origin::Success) as f64 / draws as f64;
    let rl = b.sample_rl(draws, &mut rng).count(Origin::Replay) as f64 / draws as f64;
    let ratios_ok = (bc - 0.5).abs() <= 0.01 && (rl - 0.5).abs() <= 0.01;
    outcome(
        routed && ratios_ok,
        format!("routing exact: {routed}; over {draws} draws success share {bc:.4}, replay share {rl:.4}"),
    )
}

// Training arms.

struct Arm {
    episodes: Vec<EpisodeMetrics>,
    checkpoints: Vec<PathBuf>,
    eval: EvalReport,
}

impl Arm {
    fn last(&self) -> &EpisodeMetrics {
        self.episodes.last().expect("online episodes ran")
    }
}

fn run_arm(task: TaskId, variant: &str, run_root: Option<&Path>) -> Arm {
    let t = Instant::now();
    let mut cfg = preset();
    cfg.task = task;
    cfg.ablation = Ablation::variant(variant).unwrap();
    let spec = cfg.task_spec().unwrap();
    let demos = collect_demos(&spec, cfg.n_demos, cfg.demo_noise, cfg.seed).unwrap();
    let mut buffers = BufferSet::with_capacity(task.obs_dim(), cfg.capacity);
    buffers.load_offline_demos(&demos).unwrap();
    let mut learner = init_learner(&cfg).unwrap();
    pretrain(&cfg, &mut learner, &buffers, &mut NullObserver, None).unwrap();
    let src = ScriptedIntervention::new(cfg.intervention, OraclePolicy::compile(&spec, 0.0).unwrap(), cfg.seed);
    let mut run = run_root.map(|r| {
        cfg.checkpoint_every = cfg.online_episodes / 4;
        RunDir::create(r, &cfg).unwrap()
    });
    let out = train_online(&cfg, &mut learner, &mut buffers, Box::new(src), &mut NullObserver, run.as_mut()).unwrap();
    let eval = evaluate(&learner.bundle, &spec, EVAL_EPISODES, EVAL_SEED_BASE, cfg.arbitration()).unwrap();
    eprintln!(
        "  [{} {variant}] {:.0}s, success {:.2}",
        task.name(),
        t.elapsed().as_secs_f64(),
        eval.success_rate
    );
    Arm {
        episodes: out.episodes,
        checkpoints: out.checkpoints,
        eval,
    }
}

fn mixture_beats_single_experts(task: TaskId, base: &Arm) -> Outcome {
    let bc = run_arm(task, "bc_only", None).eval.success_rate;
    let rl = run_arm(task, "rl_only", None).eval.success_rate;
    let m = base.eval.success_rate;
    outcome(
        m >= bc && m >= rl && m >= 0.9,
        format!("{}: mixture {m:.2}, imitation only {bc:.2}, RL only {rl:.2} (need >= both and >= 0.90)", task.name()),
    )
}

fn demo_and_auto_shares(base: &Arm, no_reg: &Arm) -> Outcome {
    let (b, n) = (base.last(), no_reg.last());
    outcome(
        n.demo_ratio > b.demo_ratio && n.auto_success_ratio < b.auto_success_ratio,
        format!(
            "demo% {:.2} without regularizer vs {:.2}; auto% {:.2} vs {:.2}",
            n.demo_ratio, b.demo_ratio, n.auto_success_ratio, b.auto_success_ratio
        ),
    )
}

fn switch_smoothness(base: &Arm, no_reg: &Arm) -> Outcome {
    let (b, n) = (base.eval.switch_stats.ratio(), no_reg.eval.switch_stats.ratio());
    let pass = matches!((b, n), (Some(b), Some(n)) if b <= 1.5 && n > b);
    outcome(pass, format!("switch/steady displacement ratio {b:?} with regularizer, {n:?} without"))
}

fn rl_share_over_training(base: &Arm) -> Outcome {
    let cps = &base.checkpoints;
    if cps.len() < 3 {
        return outcome(false, format!("only {} checkpoints", cps.len()));
    }
    let picks = [&cps[0], &cps[cps.len() / 2], &cps[cps.len() - 1]];
    let task = gatelab::env::TaskSpec::builtin(TaskId::DrawerPlace);
    let ratios: Vec<f64> = picks
        .iter()
        .map(|dir| {
            let bundle = load_checkpoint(dir, TaskId::DrawerPlace).unwrap();
            evaluate(&bundle, &task, 5, EVAL_SEED_BASE, Arbitration::Gate).unwrap().rl_ratio
        })
        .collect();
    let pass = ratios.windows(2).all(|w| w[1] >= w[0] - 0.05);
    let names: Vec<String> = picks.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
    outcome(pass, format!("RL selection share at {names:?}: {ratios:.3?} (tolerance 0.05)"))
}

fn gripper_head_comparison(dbc: &Arm, dqn: &Arm) -> Outcome {
    let (a, b) = (dbc.eval.success_rate, dqn.eval.success_rate);
    outcome(b < a, format!("lid_box success: classifier {a:.2}, Q-learning {b:.2}"))
}

// Reproducibility.

fn reproducibility() -> Outcome {
    let run = || {
        let cfg = RunConfig::default()
            .with_overrides(&[
                "hidden=[32, 32]",
                "gate_hidden=[16]",
                "batch_size=32",
                "n_offline=200",
                "online_episodes=4",
                "metrics_every=1",
                "schedule=\"interleaved\"",
            ])
            .unwrap();
        let spec = cfg.task_spec().unwrap();
        let demos = collect_demos(&spec, cfg.n_demos, cfg.demo_noise, cfg.seed).unwrap();
        let mut buffers = BufferSet::new(spec.id.obs_dim());
        buffers.load_offline_demos(&demos).unwrap();
        let mut learner = init_learner(&cfg).unwrap();
        let mut records = pretrain(&cfg, &mut learner, &buffers, &mut NullObserver, None).unwrap();
        let src = ScriptedIntervention::new(cfg.intervention, OraclePolicy::compile(&spec, 0.0).unwrap(), cfg.seed);
        let out = train_online(&cfg, &mut learner, &mut buffers, Box::new(src), &mut NullObserver, None).unwrap();
        records.extend(out.records);
        let records: Vec<String> =
            records.iter().map(|r| serde_json::to_string(&r.without_wall_clock()).unwrap()).collect();
        (records, learner.into_bundle())
    };
    let (a, ba) = run();
    let (b, bb) = run();
    let same = a == b && ba == bb;
    let first_diff = a.iter().zip(&b).position(|(x, y)| x != y);
    outcome(
        same && !a.is_empty(),
        format!("{} metrics records, identical: {same}, parameters identical: {}, first difference {first_diff:?}", a.len(), ba == bb),
    )
}

fn main() {
    let mut failures = 0;
    let mut report = |id: u32, name: &str, o: Outcome| {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        if !o.pass {
            failures += 1;
        }
        println!("{tag} [{id}] {name}: {}", o.detail);
    };
    report(1, "loss gradients match finite differences at 1e-4", gradients());
    report(2, "gate objective algebra", gate_algebra());
    report(3, "buffer routing and even sampling mixtures", buffers());
    report(9, "single-threaded runs are bit-identical", reproducibility());

    let scratch = tempfile::tempdir().unwrap();
    let drawer = run_arm(TaskId::DrawerPlace, "base", Some(&scratch.path().join("drawer_base")));
    report(4, "mixture success on drawer_place", mixture_beats_single_experts(TaskId::DrawerPlace, &drawer));
    let dual = run_arm(TaskId::DualInsert, "base", None);
    report(4, "mixture success on dual_insert", mixture_beats_single_experts(TaskId::DualInsert, &dual));
    drop(dual);

    let no_reg = run_arm(TaskId::DrawerPlace, "no_bc_reg", None);
    report(5, "regularizer lowers demo share and raises auto share", demo_and_auto_shares(&drawer, &no_reg));
    report(6, "regularizer keeps expert switches smooth", switch_smoothness(&drawer, &no_reg));
    report(7, "RL selection share does not fall over training", rl_share_over_training(&drawer));
    drop((drawer, no_reg));

    let lid = run_arm(TaskId::LidBox, "base", None);
    let lid_dqn = run_arm(TaskId::LidBox, "gripper_dqn", None);
    report(8, "classified gripper beats Q-learned gripper on lid_box", gripper_head_comparison(&lid, &lid_dqn));

    if failures > 0 {
        println!("{failures} acceptance check(s) failed");
        std::process::exit(1);
    }
}
