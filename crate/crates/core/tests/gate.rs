mod common;

use common::*;
use ctl_tensor::{Tape, Tensor};
use ctlformer::gate::{
    apply_gates, blend_residual, compute_gates, estimate_noise, gate_bias, GateNet, GateVector,
    NOISE_FEATURES,
};
use ctlformer::layers::Linear;
use ctlformer::tokenizer::TokenizerConfig;
use ctlformer::{Error, TensorError};
use proptest::prelude::*;
use rand_chacha::ChaCha8Rng;

fn tcfg() -> TokenizerConfig {
    TokenizerConfig::default()
}

fn grid(n: usize) -> (usize, usize) {
    tcfg().token_grid(n, n).unwrap()
}

fn net(
    tape: &mut Tape<f64>,
    w1: Tensor<f64>,
    b1: Tensor<f64>,
    w2: Tensor<f64>,
    b2: f64,
) -> GateNet {
    GateNet {
        fc1: Linear {
            weight: tape.leaf(w1),
            bias: tape.leaf(b1),
        },
        fc2: Linear {
            weight: tape.leaf(w2),
            bias: tape.leaf(Tensor::full(&[1], b2)),
        },
    }
}

fn random_net(tape: &mut Tape<f64>, r: &mut ChaCha8Rng, hidden: usize) -> GateNet {
    let w1 = uniform(r, &[NOISE_FEATURES, hidden], -1.0, 1.0);
    let b1 = uniform(r, &[hidden], -1.0, 1.0);
    let w2 = uniform(r, &[hidden, 1], -1.0, 1.0);
    net(tape, w1, b1, w2, 0.3)
}

fn mean_laplacian_std(tile: &Tensor<f64>) -> f64 {
    let n = tile.shape()[1];
    let d = estimate_noise(tile, grid(n), &tcfg()).unwrap().values;
    let rows = d.shape()[0];
    (0..rows).map(|i| d.at(&[i, 0])).sum::<f64>() / rows as f64
}

#[test]
fn constant_tile_has_zero_descriptors() {
    let tile = Tensor::full(&[1, 16, 16], 0.4);
    let d = estimate_noise(&tile, grid(16), &tcfg()).unwrap().values;
    assert_eq!(d.shape(), &[64, NOISE_FEATURES]);
    assert!(d.data().iter().all(|&v| v == 0.0));
}

#[test]
fn noise_descriptor_doubles_with_amplitude() {
    // Independent draws per amplitude on full-size tiles.
    for seed in 0..100 {
        let mut r = rng(1000 + seed);
        let noisy = |r: &mut ChaCha8Rng, a: f64| {
            let n = normal(r, &[1, 64, 64], a);
            n.map(|v| 0.5 + v)
        };
        let x1 = noisy(&mut r, 0.05);
        let x2 = noisy(&mut r, 0.10);
        let ratio = mean_laplacian_std(&x2) / mean_laplacian_std(&x1);
        assert!((1.8..=2.2).contains(&ratio), "seed {seed}: ratio {ratio}");
    }
}

#[test]
fn estimate_noise_rejects_inconsistent_grid() {
    let tile = Tensor::<f64>::zeros(&[1, 16, 16]);
    let err = estimate_noise(&tile, (7, 8), &tcfg()).unwrap_err();
    assert!(matches!(err, Error::Contract(_)), "{err}");
}

#[test]
fn zero_network_gives_half_gates() {
    let mut r = rng(20);
    let mut tape = Tape::new();
    let gn = net(
        &mut tape,
        Tensor::zeros(&[2, 16]),
        Tensor::zeros(&[16]),
        Tensor::zeros(&[16, 1]),
        0.0,
    );
    let d = tape.constant(uniform(&mut r, &[30, 2], 0.0, 10.0));
    let g = compute_gates(&mut tape, d, &gn).unwrap();
    assert_eq!(g.len, 30);
    assert!(tape.value(g.g).data().iter().all(|&v| v == 0.5));
}

#[test]
fn identical_rows_give_identical_gates() {
    let mut r = rng(21);
    let mut tape = Tape::new();
    let gn = random_net(&mut tape, &mut r, 16);
    let d = tape.constant(Tensor::from_fn(&[12, 2], |i| [0.3, 1.7][i % 2]));
    let g = compute_gates(&mut tape, d, &gn).unwrap();
    let v = tape.value(g.g).data();
    assert!(v.iter().all(|&x| x == v[0]));
}

#[test]
fn gate_is_monotone_in_laplacian_feature() {
    let mut tape = Tape::new();
    let w1 = Tensor::from_fn(&[2, 4], |i| [0.5, 0.2, 1.0, 0.1, 0.3, 0.3, 0.3, 0.3][i]);
    let gn = net(
        &mut tape,
        w1,
        Tensor::zeros(&[4]),
        Tensor::full(&[4, 1], 0.7),
        -0.5,
    );
    let d = tape.constant(Tensor::from_fn(&[10, 2], |i| {
        if i % 2 == 0 {
            (i / 2) as f64 * 0.4
        } else {
            1.0
        }
    }));
    let g = compute_gates(&mut tape, d, &gn).unwrap();
    let v = tape.value(g.g).data();
    assert!(v.windows(2).all(|w| w[1] >= w[0]), "{v:?}");
    assert!(v[9] > v[0]);
}

#[test]
fn compute_gates_rejects_width_mismatch() {
    let mut r = rng(22);
    let mut tape = Tape::new();
    let gn = random_net(&mut tape, &mut r, 4);
    let d = tape.constant(Tensor::zeros(&[5, 3]));
    let err = compute_gates(&mut tape, d, &gn).unwrap_err();
    assert!(matches!(err, Error::Tensor(TensorError::Shape(_))), "{err}");
}

#[test]
fn gates_stay_open_on_random_descriptors() {
    let mut r = rng(23);
    let mut tape = Tape::new();
    let gn = random_net(&mut tape, &mut r, 16);
    let d = tape.constant(uniform(&mut r, &[1000, 2], 0.0, 1000.0));
    let g = compute_gates(&mut tape, d, &gn).unwrap();
    for &v in tape.value(g.g).data() {
        assert!(v > 0.0 && v < 1.0 && v.is_finite(), "{v}");
    }
}

fn softmax_rows(t: &Tensor<f64>) -> Vec<f64> {
    let n = *t.shape().last().unwrap();
    let mut out = Vec::new();
    for row in t.data().chunks(n) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        out.extend(row.iter().map(|v| (v - m).exp() / z));
    }
    out
}

fn gates(tape: &mut Tape<f64>, values: Tensor<f64>) -> GateVector {
    let len = values.shape()[0];
    GateVector {
        g: tape.constant(values),
        len,
    }
}

#[test]
fn uniform_gates_leave_softmax_unchanged() {
    let mut r = rng(24);
    let mut tape = Tape::new();
    let logits = uniform(&mut r, &[2, 6, 6], -3.0, 3.0);
    let l = tape.constant(logits.clone());
    let g = gates(&mut tape, Tensor::full(&[6, 1], 0.37));
    let gated = apply_gates(&mut tape, l, &g, 1.0).unwrap();
    let gated = tape.softmax(gated, 2).unwrap();
    let plain = softmax_rows(&logits);
    for (a, b) in tape.value(gated).data().iter().zip(&plain) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn zero_strength_leaves_logits_unchanged() {
    let mut r = rng(25);
    let mut tape = Tape::new();
    let logits = uniform(&mut r, &[1, 4, 4], -3.0, 3.0);
    let l = tape.constant(logits.clone());
    let g = gates(&mut tape, uniform(&mut r, &[4, 1], 0.1, 0.9));
    let out = apply_gates(&mut tape, l, &g, 0.0).unwrap();
    assert_eq!(tape.value(out).data(), logits.data());
    assert!(gate_bias(&mut tape, &g, 0.0).unwrap().is_none());
}

#[test]
fn log_bias_reallocates_mass_by_gate_ratio() {
    let mut tape = Tape::new();
    let l = tape.constant(Tensor::zeros(&[1, 2, 2]));
    let g = gates(&mut tape, Tensor::from_f64(&[2, 1], &[0.9, 0.1]).unwrap());
    let out = apply_gates(&mut tape, l, &g, 1.0).unwrap();
    let w = tape.softmax(out, 2).unwrap();
    for q in 0..2 {
        assert!((tape.value(w).at(&[0, q, 0]) - 0.9).abs() < 1e-6);
    }
}

#[test]
fn apply_gates_rejects_mismatched_logits() {
    let mut tape = Tape::new();
    let l = tape.constant(Tensor::zeros(&[1, 3, 3]));
    let g = gates(&mut tape, Tensor::full(&[4, 1], 0.5));
    assert!(apply_gates(&mut tape, l, &g, 1.0).is_err());
    assert!(apply_gates(
        &mut tape,
        l,
        &gates(&mut Tape::new(), Tensor::full(&[3, 1], 0.5)),
        -1.0
    )
    .is_err());
}

#[test]
fn blend_endpoints() {
    let mut r = rng(26);
    let mut tape = Tape::new();
    let a = tape.constant(uniform(&mut r, &[5, 4], -1.0, 1.0));
    let b = tape.constant(uniform(&mut r, &[5, 4], -1.0, 1.0));
    let ones = gates(&mut tape, Tensor::ones(&[5, 1]));
    let out = blend_residual(&mut tape, a, b, &ones).unwrap();
    assert_eq!(tape.value(out).data(), tape.value(a).data());
    let half = gates(&mut tape, Tensor::full(&[5, 1], 0.5));
    let out = blend_residual(&mut tape, a, b, &half).unwrap();
    let (av, bv) = (tape.value(a).data(), tape.value(b).data());
    for (i, &o) in tape.value(out).data().iter().enumerate() {
        assert!((o - 0.5 * (av[i] + bv[i])).abs() < 1e-15);
    }
    let short = gates(&mut tape, Tensor::ones(&[4, 1]));
    assert!(blend_residual(&mut tape, a, b, &short).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn descriptors_are_shift_invariant_and_homogeneous(
        seed in any::<u64>(), shift in -50.0f64..50.0, scale in 0.1f64..10.0,
    ) {
        let mut r = rng(seed);
        let x = uniform(&mut r, &[1, 16, 16], 0.0, 1.0);
        let d = |t: &Tensor<f64>| estimate_noise(t, grid(16), &tcfg()).unwrap().values;
        let base = d(&x);
        let shifted = d(&x.map(|v| v + shift));
        let scaled = d(&x.map(|v| v * scale));
        for i in 0..base.numel() {
            prop_assert!((shifted.data()[i] - base.data()[i]).abs() < 1e-5);
            prop_assert!((scaled.data()[i] - scale * base.data()[i]).abs() < 1e-5);
            prop_assert!(base.data()[i] >= 0.0);
        }
    }

    #[test]
    fn gates_are_a_per_token_map(seed in any::<u64>(), n in 2usize..20) {
        let mut r = rng(seed);
        let mut tape = Tape::new();
        let gn = random_net(&mut tape, &mut r, 8);
        let d = uniform(&mut r, &[n, 2], 0.0, 5.0);
        let rev = Tensor::from_fn(&[n, 2], |i| d.at(&[n - 1 - i / 2, i % 2]));
        let (dv, rv) = (tape.constant(d), tape.constant(rev));
        let g = compute_gates(&mut tape, dv, &gn).unwrap();
        let gr = compute_gates(&mut tape, rv, &gn).unwrap();
        for i in 0..n {
            prop_assert_eq!(tape.value(gr.g).data()[i], tape.value(g.g).data()[n - 1 - i]);
        }
    }

    #[test]
    fn blend_stays_between_inputs(seed in any::<u64>()) {
        let mut r = rng(seed);
        let mut tape = Tape::new();
        let a = tape.constant(uniform(&mut r, &[7, 5], -4.0, 4.0));
        let b = tape.constant(uniform(&mut r, &[7, 5], -4.0, 4.0));
        let g = gates(&mut tape, uniform(&mut r, &[7, 1], 0.0, 1.0));
        let out = blend_residual(&mut tape, a, b, &g).unwrap();
        let (av, bv) = (tape.value(a).data(), tape.value(b).data());
        for (i, &o) in tape.value(out).data().iter().enumerate() {
            prop_assert!(o >= av[i].min(bv[i]) - 1e-12 && o <= av[i].max(bv[i]) + 1e-12);
        }
    }
}
