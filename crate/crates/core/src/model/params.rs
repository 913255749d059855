use ctl_tensor::{Real, Tape, Tensor, Var};
use indexmap::IndexMap;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::gate::NOISE_FEATURES;
use crate::tokenizer::STEM_KERNEL;

/// Named learnable arrays in a fixed declaration order.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters<F: Real = f32> {
    map: IndexMap<String, Tensor<F>>,
}

impl<F: Real> Default for Parameters<F> {
    fn default() -> Self {
        Parameters {
            map: IndexMap::new(),
        }
    }
}

impl<F: Real> Parameters<F> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<F>) -> Result<()> {
        let name = name.into();
        if self.map.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter {name}")));
        }
        self.map.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.map.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<F>)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    pub fn cast<G: Real>(&self) -> Parameters<G> {
        Parameters {
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Same names and shapes, every value zero.
    pub fn zeros_like(&self) -> Self {
        Parameters {
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    /// Record every parameter on `tape`, as trainable leaves or constants.
    pub fn bind<G: Real>(&self, tape: &mut Tape<G>, trainable: bool) -> IndexMap<String, Var> {
        self.map
            .iter()
            .map(|(k, v)| {
                let t = v.cast::<G>();
                let var = if trainable {
                    tape.leaf(t)
                } else {
                    tape.constant(t)
                };
                (k.clone(), var)
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zero,
    One,
    /// Normal with std √(2 / fan_in) for `[C_out×C_in×k×k]` kernels.
    ConvFanIn,
    /// Normal with std 0.02, resampled outside ±2σ.
    TruncNormal,
    /// Constant logit so that sigmoid(value) equals the given probability.
    Logit(f64),
}

pub const PROJ_STD: f64 = 0.02;

struct Layout {
    entries: Vec<(String, Vec<usize>, Init)>,
    token_hidden: usize,
}

impl Layout {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) {
        self.entries.push((name, shape, init));
    }

    fn conv(&mut self, name: &str, c_out: usize, c_in: usize, k: usize) {
        self.push(
            format!("{name}.weight"),
            vec![c_out, c_in, k, k],
            Init::ConvFanIn,
        );
        self.push(format!("{name}.bias"), vec![c_out], Init::Zero);
    }

    fn linear(&mut self, name: &str, i: usize, o: usize) {
        self.push(format!("{name}.weight"), vec![i, o], Init::TruncNormal);
        self.push(format!("{name}.bias"), vec![o], Init::Zero);
    }

    fn norm(&mut self, name: &str, d: usize) {
        self.push(format!("{name}.gain"), vec![d], Init::One);
        self.push(format!("{name}.bias"), vec![d], Init::Zero);
    }

    fn projection(&mut self, name: &str, i: usize, o: usize) {
        match self.token_hidden {
            0 => self.linear(&format!("{name}.proj"), i, o),
            h => {
                self.linear(&format!("{name}.fc1"), i, h);
                self.linear(&format!("{name}.fc2"), h, o);
            }
        }
    }
}

/// Declared parameter layout: `(name, shape, init)` in declaration order.
pub fn param_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let t = &cfg.tokenizer;
    let c = t.stem_channels;
    let d = cfg.attention.dim;
    let p = t.patch_len();
    let ff = cfg.attention.mlp_ratio * d;
    let mut l = Layout {
        entries: Vec::new(),
        token_hidden: t.token_hidden,
    };
    l.conv("stem", c, 1, STEM_KERNEL);
    l.conv("fine", c, c, t.fine_kernel);
    l.conv("coarse", c, c, t.coarse_kernel);
    l.projection("tokenize", p, d);
    l.push(
        "pos_embed".into(),
        vec![cfg.num_tokens(), d],
        Init::TruncNormal,
    );
    for b in 0..cfg.depth {
        let pre = format!("block.{b}");
        l.norm(&format!("{pre}.norm1"), d);
        for branch in ["local", "global"] {
            for proj in ["q_proj", "k_proj", "v_proj", "o_proj"] {
                l.linear(&format!("{pre}.{branch}.{proj}"), d, d);
            }
        }
        l.push(
            format!("{pre}.alpha_raw"),
            vec![1],
            Init::Logit(cfg.attention.alpha_init),
        );
        l.norm(&format!("{pre}.norm2"), d);
        l.linear(&format!("{pre}.ffn.fc1"), d, ff);
        l.linear(&format!("{pre}.ffn.fc2"), ff, d);
    }
    l.linear("gate.fc1", NOISE_FEATURES, cfg.gate.hidden);
    l.linear("gate.fc2", cfg.gate.hidden, 1);
    l.projection("detokenize", d, p);
    l.conv("head", 1, t.fused_channels(), STEM_KERNEL);
    l.entries
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-7, 1.0 - 1e-7);
    (p / (1.0 - p)).ln()
}

/// Deterministic initialization from `seed`.
pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Parameters> {
    cfg.validate()?;
    let mut rng = crate::rng::stream(seed, 0x1417, 0);
    let mut params = Parameters::new();
    for (name, shape, kind) in param_layout(cfg) {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = match kind {
            Init::Zero => vec![0.0; n],
            Init::One => vec![1.0; n],
            Init::Logit(p) => vec![logit(p) as f32; n],
            Init::ConvFanIn => {
                let fan_in = shape[1] * shape[2] * shape[3];
                let std = (2.0 / fan_in as f64).sqrt();
                (0..n).map(|_| (normal(&mut rng) * std) as f32).collect()
            }
            Init::TruncNormal => (0..n)
                .map(|_| (truncated_normal(&mut rng) * PROJ_STD) as f32)
                .collect(),
        };
        params.insert(name, Tensor::new(&shape, data)?)?;
    }
    Ok(params)
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn truncated_normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let z: f64 = normal(rng);
        if z.abs() <= 2.0 {
            return z;
        }
    }
}

/// Closed-form scalar count implied by `cfg`.
pub fn param_count(cfg: &ModelConfig) -> usize {
    let t = &cfg.tokenizer;
    let c = t.stem_channels;
    let d = cfg.attention.dim;
    let p = t.patch_len();
    let ff = cfg.attention.mlp_ratio * d;
    let k2 = |k: usize| k * k;
    let linear = |i: usize, o: usize| i * o + o;
    let projection = |i: usize, o: usize| {
        if t.token_hidden == 0 {
            linear(i, o)
        } else {
            linear(i, t.token_hidden) + linear(t.token_hidden, o)
        }
    };
    let stem = c * k2(STEM_KERNEL) + c;
    let branches = c * c * k2(t.fine_kernel) + c + c * c * k2(t.coarse_kernel) + c;
    let block = 4 * d + 8 * linear(d, d) + 1 + linear(d, ff) + linear(ff, d);
    let gate = linear(NOISE_FEATURES, cfg.gate.hidden) + linear(cfg.gate.hidden, 1);
    let head = 2 * c * k2(STEM_KERNEL) + 1;
    stem + branches
        + projection(p, d)
        + cfg.num_tokens() * d
        + cfg.depth * block
        + gate
        + projection(d, p)
        + head
}

/// Scalar count of one transformer block.
pub fn block_param_count(cfg: &ModelConfig) -> usize {
    let d = cfg.attention.dim;
    let ff = cfg.attention.mlp_ratio * d;
    4 * d + 8 * (d * d + d) + 1 + (d * ff + ff) + (ff * d + d)
}
