//! Full denoiser: stem, two-scale features, soft split, gated local/global
//! blocks, fold back, head convolution and residual noise subtraction.

pub mod checkpoint;
pub mod config;
pub mod params;

use ctl_tensor::{Real, Tape, Tensor, TensorError, Var};
use indexmap::IndexMap;

pub use checkpoint::{
    load_checkpoint, load_checkpoint_with, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use config::ModelConfig;
pub use params::{block_param_count, init, param_count, param_layout, Init, Parameters};

use crate::attention::{transformer_block, BlockParams, BlockTrace};
use crate::error::Result;
use crate::gate::{compute_gates, estimate_noise, neutral_gates, GateNet, GateVector};
use crate::layers::{Conv, ParamScope};
use crate::tokenizer::{
    detokenize, embed_stem, multi_scale_features, tokenize, Projection, ScaleTag, TokenMap,
};

/// Every parameter of the network as tape variables.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub stem: Conv,
    pub fine: Conv,
    pub coarse: Conv,
    pub tokenize: Projection,
    pub pos_embed: Var,
    pub blocks: Vec<BlockParams>,
    pub gate: GateNet,
    pub detokenize: Projection,
    pub head: Conv,
}

impl ModelVars {
    pub fn bind(vars: &IndexMap<String, Var>, cfg: &ModelConfig) -> Result<Self> {
        let root = ParamScope::new(vars);
        let hidden = cfg.tokenizer.token_hidden;
        let blocks = (0..cfg.depth)
            .map(|i| {
                let prefix = format!("block.{i}");
                BlockParams::bind(&root.child(&prefix))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelVars {
            stem: Conv::bind(&root, "stem")?,
            fine: Conv::bind(&root, "fine")?,
            coarse: Conv::bind(&root, "coarse")?,
            tokenize: Projection::bind(&root.child("tokenize"), hidden)?,
            pos_embed: root.var("pos_embed")?,
            blocks,
            gate: GateNet::bind(&root.child("gate"))?,
            detokenize: Projection::bind(&root.child("detokenize"), hidden)?,
            head: Conv::bind(&root, "head")?,
        })
    }
}

/// Record `params` on `tape` and bind them.
pub fn bind_params<F: Real, G: Real>(
    tape: &mut Tape<G>,
    cfg: &ModelConfig,
    params: &Parameters<F>,
    trainable: bool,
) -> Result<(IndexMap<String, Var>, ModelVars)> {
    let vars = params.bind(tape, trainable);
    let mv = ModelVars::bind(&vars, cfg)?;
    Ok((vars, mv))
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Denoised tile `[1×T×T]` in display units.
    pub output: Var,
    pub gates: GateVector,
    pub traces: Vec<BlockTrace>,
}

/// Forward pass over one `[1×T×T]` tile in display units.
pub fn forward<F: Real>(
    tape: &mut Tape<F>,
    cfg: &ModelConfig,
    mv: &ModelVars,
    input: Var,
) -> Result<ForwardOutput> {
    let t = cfg.tile_size;
    if tape.shape(input) != [1, t, t] {
        return Err(TensorError::Shape(format!(
            "model expects a [1×{t}×{t}] tile, got {:?}",
            tape.shape(input)
        ))
        .into());
    }
    let tc = &cfg.tokenizer;
    let scale = F::of(cfg.intensity_scale);
    let x = tape.scale(input, F::one() / scale);

    let stem = embed_stem(tape, x, &mv.stem, tc)?;
    let (fine, coarse) = multi_scale_features(tape, stem, &mv.fine, &mv.coarse)?;
    let tm = tokenize(tape, fine, coarse, &mv.tokenize, tc)?;
    let tokens = tape.add(tm.tokens, mv.pos_embed)?;
    let mut tm = TokenMap::new(tape, tokens, tm.grid_h, tm.grid_w, ScaleTag::MultiScale)?;

    let gates = if cfg.gate.enabled {
        let desc = estimate_noise(tape.value(x), (tm.grid_h, tm.grid_w), tc)?;
        let d = tape.constant(desc.values);
        compute_gates(tape, d, &mv.gate)?
    } else {
        neutral_gates(tape, tm.len())
    };

    let mut traces = Vec::with_capacity(mv.blocks.len());
    for (i, bp) in mv.blocks.iter().enumerate() {
        let (next, trace) =
            transformer_block(tape, &tm, bp, &gates, cfg.gate.strength, &cfg.attention, i)?;
        tm = next;
        traces.push(trace);
    }

    let fused = detokenize(tape, &tm, (t, t), &mv.detokenize, tc)?;
    let head = mv.head.forward(tape, fused)?;
    let head = tape.scale(head, scale);
    let output = if cfg.residual {
        tape.sub(input, head)?
    } else {
        head
    };
    Ok(ForwardOutput {
        output,
        gates,
        traces,
    })
}

/// Per-sample training loss: MSE between output and target in normalized
/// units (display units divided by the intensity scale).
pub fn tile_loss<F: Real>(
    tape: &mut Tape<F>,
    cfg: &ModelConfig,
    mv: &ModelVars,
    noisy: Var,
    clean: Var,
) -> Result<Var> {
    let out = forward(tape, cfg, mv, noisy)?.output;
    let mse = tape.mse(out, clean)?;
    let s = cfg.intensity_scale;
    Ok(tape.scale(mse, F::of(1.0 / (s * s))))
}

/// Configuration plus parameters, with eval-mode helpers.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Parameters,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init(&config, seed)?;
        Ok(Model { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: Parameters) -> Result<Self> {
        config.validate()?;
        check_layout(&config, &params)?;
        Ok(Model { config, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Eval-mode forward of one tile; deterministic.
    pub fn denoise_tile(&self, tile: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::<f32>::new();
        let (_, mv) = bind_params(&mut tape, &self.config, &self.params, false)?;
        let x = tape.constant(tile.clone());
        let out = forward(&mut tape, &self.config, &mv, x)?.output;
        let y = tape.value(out).clone();
        if !y.all_finite() {
            return Err(crate::Error::NonFinite("model output".into()));
        }
        Ok(y)
    }

    /// Zero the head convolution so a residual model becomes the identity map.
    pub fn zero_head(&mut self) {
        for name in ["head.weight", "head.bias"] {
            if let Some(t) = self.params.get_mut(name) {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
}

/// Names and shapes of `params` must match the layout implied by `cfg`.
pub fn check_layout<F: Real>(cfg: &ModelConfig, params: &Parameters<F>) -> Result<()> {
    let layout = param_layout(cfg);
    if layout.len() != params.len() {
        return crate::error::contract(format!(
            "parameter set has {} arrays, configuration implies {}",
            params.len(),
            layout.len()
        ));
    }
    for ((name, shape, _), (pname, p)) in layout.iter().zip(params.iter()) {
        if name != pname || shape.as_slice() != p.shape() {
            return crate::error::contract(format!(
                "parameter {pname} {:?} does not match expected {name} {shape:?}",
                p.shape()
            ));
        }
    }
    Ok(())
}
