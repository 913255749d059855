#![allow(dead_code)]

use ctl_tensor::{Tape, Tensor, Var};
use ctlformer::layers::{Conv, Linear};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ctlformer::rng::stream(seed, 0x7E57, 0)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

pub fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| std * rng.sample::<f64, _>(StandardNormal))
}

pub fn linear(tape: &mut Tape<f64>, w: Tensor<f64>) -> Linear {
    let out = w.shape()[1];
    Linear {
        weight: tape.leaf(w),
        bias: tape.leaf(Tensor::zeros(&[out])),
    }
}

pub fn random_linear(tape: &mut Tape<f64>, rng: &mut ChaCha8Rng, i: usize, o: usize) -> Linear {
    Linear {
        weight: tape.leaf(uniform(rng, &[i, o], -0.5, 0.5)),
        bias: tape.leaf(uniform(rng, &[o], -0.1, 0.1)),
    }
}

pub fn conv(tape: &mut Tape<f64>, w: Tensor<f64>) -> Conv {
    let out = w.shape()[0];
    Conv {
        weight: tape.leaf(w),
        bias: tape.leaf(Tensor::zeros(&[out])),
    }
}

pub fn value(tape: &Tape<f64>, v: Var) -> Tensor<f64> {
    tape.value(v).clone()
}

/// Pixel `(y, x)` of channel `c` in a `[C×H×W]` tensor.
pub fn at3(t: &Tensor<f64>, c: usize, y: usize, x: usize) -> f64 {
    t.at(&[c, y, x])
}

/// Quarter turn of every channel: `out[y][x] = in[x][n−1−y]` on square maps.
pub fn rotate(t: &Tensor<f64>) -> Tensor<f64> {
    let (c, n) = (t.shape()[0], t.shape()[1]);
    assert_eq!(t.shape()[2], n);
    Tensor::from_fn(&[c, n, n], |i| {
        let (ch, y, x) = (i / (n * n), (i / n) % n, i % n);
        t.at(&[ch, x, n - 1 - y])
    })
}
