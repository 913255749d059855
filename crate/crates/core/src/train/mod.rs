//! Deterministic training: random augmented crops, per-sample tapes with an
//! ordered gradient reduction, Adam updates, checkpoints and evaluation.

pub mod adam;
pub mod log;

use std::time::Instant;

use ctl_tensor::{Tape, Tensor};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adam::{Adam, AdamConfig};
pub use log::{log_path, read_log_csv, write_log_csv, LogRow};

use crate::data::{augment::Transform, SlicePair};
use crate::error::{contract, Error, Result};
use crate::metrics::{DisplayWindow, ImageMetrics, MetricReport};
use crate::model::{bind_params, init, tile_loss, Checkpoint, Model, ModelConfig, Parameters};
use crate::tiler::{denoise_image, Blend};

const BATCH_STREAM: u64 = 0xBA7C;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Total optimizer steps (a resumed run continues up to this count).
    pub steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4,
            learning_rate: 1e-4,
            steps: 1000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return contract("batch_size must be at least 1");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return contract(format!(
                "learning rate {} must be finite and ≥ 0",
                self.learning_rate
            ));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0)
        {
            return contract("optimizer moments need β ∈ [0, 1) and eps > 0");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// One training example: noisy input tile and clean target tile.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub noisy: Tensor,
    pub clean: Tensor,
}

fn crop(t: &Tensor, y: usize, x: usize, size: usize) -> Result<Tensor> {
    let w = t.shape()[2];
    let mut data = Vec::with_capacity(size * size);
    for r in y..y + size {
        data.extend_from_slice(&t.data()[r * w + x..r * w + x + size]);
    }
    Ok(Tensor::new(&[1, size, size], data)?)
}

/// Batch for `step`: random pair, random crop and random right-angle
/// transform per sample, all drawn from a stream keyed by `(seed, step)`.
pub fn sample_batch(
    pairs: &[SlicePair],
    tile: usize,
    batch: usize,
    seed: u64,
    step: u64,
) -> Result<Vec<Sample>> {
    if pairs.is_empty() {
        return contract("training set is empty");
    }
    let mut rng = crate::rng::stream(seed, BATCH_STREAM, step);
    (0..batch)
        .map(|_| {
            let pair = &pairs[rng.random_range(0..pairs.len())];
            let (h, w) = (pair.clean.height(), pair.clean.width());
            if h < tile || w < tile {
                return contract(format!("slice {h}×{w} smaller than tile {tile}"));
            }
            let y = rng.random_range(0..=h - tile);
            let x = rng.random_range(0..=w - tile);
            let tf = Transform::sample(&mut rng);
            Ok(Sample {
                noisy: tf.apply(&crop(pair.noisy.pixels(), y, x, tile)?)?,
                clean: tf.apply(&crop(pair.clean.pixels(), y, x, tile)?)?,
            })
        })
        .collect()
}

/// Loss and gradients of one sample on its own tape.
fn sample_grads(cfg: &ModelConfig, params: &Parameters, s: &Sample) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::<f32>::new();
    let (vars, mv) = bind_params(&mut tape, cfg, params, true)?;
    let noisy = tape.constant(s.noisy.clone());
    let clean = tape.constant(s.clean.clone());
    let loss = tile_loss(&mut tape, cfg, &mv, noisy, clean)?;
    let value = tape.value(loss).item()? as f64;
    let mut grads = tape.backward(loss)?;
    let g = vars
        .values()
        .map(|&v| grads.take(v).expect("every trainable leaf has a gradient"))
        .collect();
    Ok((value, g))
}

/// Mean loss over the batch and the mean gradient, reduced in sample order.
pub fn batch_grads(
    cfg: &ModelConfig,
    params: &Parameters,
    batch: &[Sample],
) -> Result<(f64, Parameters)> {
    if batch.is_empty() {
        return contract("empty batch");
    }
    let t = cfg.tile_size;
    for s in batch {
        if s.noisy.shape() != [1, t, t] || s.clean.shape() != [1, t, t] {
            return contract(format!("batch tiles must be [1×{t}×{t}]"));
        }
    }
    let per: Vec<(f64, Vec<Tensor>)> = batch
        .par_iter()
        .map(|s| sample_grads(cfg, params, s))
        .collect::<Result<_>>()?;
    let n = batch.len() as f32;
    let mut sum = params.zeros_like();
    let mut loss = 0.0;
    for (l, g) in &per {
        loss += l;
        for ((_, acc), gi) in sum.iter_mut().zip(g) {
            acc.data_mut()
                .iter_mut()
                .zip(gi.data())
                .for_each(|(a, &b)| *a += b);
        }
    }
    for (_, acc) in sum.iter_mut() {
        acc.data_mut().iter_mut().for_each(|a| *a /= n);
    }
    Ok((loss / batch.len() as f64, sum))
}

/// Forward, MSE, backward, Adam update. Returns the pre-update batch loss.
pub fn train_step(
    params: &mut Parameters,
    adam: &mut Adam,
    batch: &[Sample],
    cfg: &ModelConfig,
    tc: &TrainConfig,
) -> Result<f64> {
    let (loss, grads) = batch_grads(cfg, params, batch)?;
    if let Some((name, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
        return Err(Error::NonFinite(format!(
            "loss {loss} at step {}; first non-finite gradient: {name}",
            adam.t + 1
        )));
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss {loss} at step {}",
            adam.t + 1
        )));
    }
    adam.update(params, &grads, tc.learning_rate)?;
    Ok(loss)
}

/// Training state that can be checkpointed and resumed.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: ModelConfig,
    pub config: TrainConfig,
    pub params: Parameters,
    pub adam: Adam,
    pub step: u64,
}

impl Trainer {
    pub fn new(model: ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let params = init(&model, config.seed)?;
        let adam = Adam::new(&params, config.adam());
        Ok(Trainer {
            model,
            config,
            params,
            adam,
            step: 0,
        })
    }

    /// Continue from `ckpt`; the stored seed replaces `config.seed`.
    pub fn resume(ckpt: Checkpoint, mut config: TrainConfig) -> Result<Self> {
        config.validate()?;
        config.seed = ckpt.seed;
        let adam = match ckpt.moments {
            Some((m, v)) => Adam {
                config: config.adam(),
                m,
                v,
                t: ckpt.step,
            },
            None => {
                return Err(Error::Contract(
                    "checkpoint has no optimizer state to resume from".into(),
                ))
            }
        };
        Ok(Trainer {
            model: ckpt.config,
            config,
            params: ckpt.params,
            adam,
            step: ckpt.step,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.model.clone(),
            params: self.params.clone(),
            step: self.step,
            seed: self.config.seed,
            moments: Some((self.adam.m.clone(), self.adam.v.clone())),
        }
    }

    pub fn to_model(&self) -> Model {
        Model {
            config: self.model.clone(),
            params: self.params.clone(),
        }
    }

    /// One step on a freshly sampled batch.
    pub fn step_once(&mut self, pairs: &[SlicePair]) -> Result<LogRow> {
        let start = Instant::now();
        let batch = sample_batch(
            pairs,
            self.model.tile_size,
            self.config.batch_size,
            self.config.seed,
            self.step,
        )?;
        let loss = train_step(
            &mut self.params,
            &mut self.adam,
            &batch,
            &self.model,
            &self.config,
        )?;
        self.step += 1;
        Ok(LogRow {
            step: self.step,
            loss,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Step until `self.config.steps`, calling `hook` after every step.
    pub fn run<H>(&mut self, pairs: &[SlicePair], mut hook: H) -> Result<Vec<LogRow>>
    where
        H: FnMut(&Trainer, &LogRow) -> Result<()>,
    {
        let mut rows = Vec::new();
        while self.step < self.config.steps {
            let row = self.step_once(pairs)?;
            hook(self, &row)?;
            rows.push(row);
        }
        Ok(rows)
    }
}

/// Tiled denoising of every test slice, scored against its clean slice.
pub fn evaluate(
    model: &Model,
    test: &[SlicePair],
    stride: usize,
    blend: Blend,
) -> Result<MetricReport> {
    if test.is_empty() {
        return contract("evaluation set is empty");
    }
    let window = DisplayWindow::default();
    let rows = test
        .iter()
        .map(|p| {
            let out = denoise_image(
                model,
                p.noisy.pixels(),
                model.config.tile_size,
                stride,
                blend,
            )?;
            Ok((
                p.clean.label(),
                ImageMetrics::compare(&out, p.clean.pixels(), window)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    MetricReport::new(window, rows)
}

/// Scores of the noisy inputs themselves.
pub fn noisy_baseline(test: &[SlicePair]) -> Result<MetricReport> {
    let window = DisplayWindow::default();
    let rows = test
        .iter()
        .map(|p| {
            Ok((
                p.clean.label(),
                ImageMetrics::compare(p.noisy.pixels(), p.clean.pixels(), window)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    MetricReport::new(window, rows)
}
