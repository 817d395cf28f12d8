//! Independent oracles for the network kit: a hand-rolled dense forward pass
//! and central finite differences.

use nnkit::{
    categorical_logprob, forward, grad, Activation, Adam, AdamConfig, MlpSpec, ParamVector,
    Tensor,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// y = W2 relu(W1 x + b1) + b2, written out longhand.
fn dense_oracle(p: &[f32], x: [f64; 2]) -> [f64; 2] {
    let (w1, rest) = p.split_at(8);
    let (b1, rest) = rest.split_at(4);
    let (w2, b2) = rest.split_at(8);
    let mut h = [0.0f64; 4];
    for (j, hj) in h.iter_mut().enumerate() {
        let z = w1[2 * j] as f64 * x[0] + w1[2 * j + 1] as f64 * x[1] + b1[j] as f64;
        *hj = z.max(0.0) as f32 as f64;
    }
    let mut y = [0.0f64; 2];
    for (k, yk) in y.iter_mut().enumerate() {
        *yk = b2[k] as f64;
        for j in 0..4 {
            *yk += w2[4 * k + j] as f64 * h[j];
        }
    }
    y
}

#[test]
fn random_relu_net_matches_dense_oracle() {
    let spec = MlpSpec::new(2, vec![4], Activation::Relu, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut params = spec.init(&mut rng, 1.0).unwrap();
    // Non-zero biases so they are exercised too.
    for (i, v) in params.values_mut()[8..12].iter_mut().enumerate() {
        *v = 0.1 * i as f32 - 0.15;
    }
    let y = forward(&params, &spec, &[1.0, -1.0]).unwrap();
    let want = dense_oracle(params.values(), [1.0, -1.0]);
    for (a, b) in y.iter().zip(want) {
        assert!((*a as f64 - b).abs() < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn quadratic_and_constant_gradients() {
    let layout = vec![nnkit::TensorLayout::new("p", vec![4])];
    let p = ParamVector::new(layout, vec![0.5, -1.0, 2.0, 0.0]).unwrap();
    let (loss, g) = grad::<f64, _>(&p, |tape, vars| {
        let sq = tape.square(vars.get(0));
        let s = tape.sum_cols(sq);
        tape.scale(s, 0.5)
    })
    .unwrap();
    assert!((loss - 2.625).abs() < 1e-12);
    assert_eq!(g.values(), p.values());

    let (_, g) = grad::<f32, _>(&p, |tape, _| tape.constant(Tensor::scalar(3.0)))
        .unwrap();
    assert!(g.values().iter().all(|&v| v == 0.0));
}

#[test]
fn non_finite_loss_names_the_term() {
    let layout = vec![nnkit::TensorLayout::new("p", vec![2])];
    let p = ParamVector::new(layout, vec![-1.0, 1.0]).unwrap();
    let err = grad::<f32, _>(&p, |tape, vars| {
        let l = tape.log(vars.get(0));
        tape.mean(l)
    })
    .unwrap_err();
    assert!(err.to_string().contains("log"), "{err}");
}

#[test]
fn mlp_mse_gradient_matches_finite_differences() {
    let spec = MlpSpec::new(3, vec![6, 5], Activation::Relu, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let params = spec.init(&mut rng, 1.0).unwrap();
    let xs = Tensor::<f64>::new(3, 3, vec![0.2, -0.4, 0.9, 1.1, 0.3, -0.7, -0.5, 0.8, 0.1]);
    let ys = Tensor::<f64>::new(3, 2, vec![0.1, -0.2, 0.5, 0.0, -0.3, 0.4]);
    let loss_on = |p: &ParamVector| {
        grad::<f64, _>(p, |tape, vars| {
            let x = tape.constant(xs.clone());
            let y = tape.constant(ys.clone());
            let out = spec.forward_tape(tape, vars, x);
            let out = tape.tanh(out);
            let d = tape.sub(out, y);
            let d = tape.square(d);
            let d = tape.sum_cols(d);
            tape.mean(d)
        })
        .unwrap()
    };
    let (_, g) = loss_on(&params);
    for i in 0..params.len() {
        let bump = |h: f32| {
            let mut q = params.clone();
            q.values_mut()[i] += h;
            let actual = q.values()[i] as f64 - params.values()[i] as f64;
            (loss_on(&q).0, actual)
        };
        let (lp, hp) = bump(1e-2);
        let (lm, hm) = bump(-1e-2);
        let fd = (lp - lm) / (hp - hm);
        let an = g.values()[i] as f64;
        let rel = (fd - an).abs() / (1e-6 + fd.abs().max(an.abs()));
        // relu kinks can sit inside a 1e-2 step; only smooth coordinates count.
        if rel > 1e-2 {
            let (lp, hp) = bump(1e-4);
            let (lm, hm) = bump(-1e-4);
            let fd2 = (lp - lm) / (hp - hm);
            assert!((fd2 - an).abs() <= 1e-3 * (1e-6 + fd2.abs()), "coord {i}");
        }
    }
}

#[test]
fn optimizer_is_deterministic() {
    let run = || {
        let spec = MlpSpec::new(4, vec![8], Activation::Relu, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = spec.init(&mut rng, 1.0).unwrap();
        let mut opt = Adam::new(p.len(), AdamConfig::default());
        for _ in 0..20 {
            let (_, g) = grad::<f32, _>(&p, |tape, vars| {
                let x = tape.constant(Tensor::new(2, 4, vec![0.1, 0.2, 0.3, 0.4, -1.0, 0.5, 0.0, 2.0]));
                let y = spec.forward_tape(tape, vars, x);
                let y = tape.square(y);
                tape.mean(y)
            })
            .unwrap();
            opt.step(p.values_mut(), g.values(), 1e-2).unwrap();
        }
        p
    };
    let (a, b) = (run(), run());
    assert!(a.values().iter().zip(b.values()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

proptest! {
    // Logits on a 1/64 grid with integer offsets keep every shifted logit
    // exactly representable, so the only error left is the log-sum-exp.
    #[test]
    fn log_softmax_shift_invariance(
        k in proptest::collection::vec(-640i32..640, 3),
        c in -1000i32..1000,
        class in 0usize..3,
    ) {
        let logits: Vec<f32> = k.iter().map(|&v| v as f32 / 64.0).collect();
        let shifted: Vec<f32> = logits.iter().map(|&v| v + c as f32).collect();
        let a = categorical_logprob(&logits, class).unwrap();
        let b = categorical_logprob(&shifted, class).unwrap();
        prop_assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
}
