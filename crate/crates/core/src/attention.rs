//! Multi-head self-attention in a full (global) and a windowed (local)
//! variant, the parity-alternating interaction that blends them, and the
//! gated pre-norm transformer block.

use std::sync::Arc;

use ctl_tensor::{Real, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::gate::{blend_residual, gate_bias, GateVector};
use crate::layers::{Linear, Norm, ParamScope};
use crate::tokenizer::TokenMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockParity {
    /// Even-indexed blocks emphasise the local branch.
    LocalFirst,
    /// Even-indexed blocks emphasise the global branch.
    GlobalFirst,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub dim: usize,
    pub heads: usize,
    /// Odd local window span in grid steps. A window of at least
    /// `2·max(grid_h, grid_w) − 1` admits every key and reduces to full attention.
    pub window: usize,
    pub alpha_init: f64,
    pub block_parity: BlockParity,
    /// Hidden width of the feed-forward layer as a multiple of `dim`.
    pub mlp_ratio: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            dim: 64,
            heads: 4,
            window: 3,
            alpha_init: 0.5,
            block_parity: BlockParity::LocalFirst,
            mlp_ratio: 4,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return contract(format!(
                "dim {} must be divisible by heads {}",
                self.dim, self.heads
            ));
        }
        if self.window.is_multiple_of(2) {
            return contract(format!("window {} must be odd", self.window));
        }
        if !(0.0..=1.0).contains(&self.alpha_init) {
            return contract(format!("alpha_init {} outside [0, 1]", self.alpha_init));
        }
        if self.mlp_ratio == 0 {
            return contract("mlp_ratio must be positive");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// True when block `index` weights the local branch by α.
    pub fn prefers_local(&self, index: usize) -> bool {
        index.is_multiple_of(2) == (self.block_parity == BlockParity::LocalFirst)
    }
}

/// Query/key/value/output projections of one attention branch.
#[derive(Clone, Copy, Debug)]
pub struct AttnProj {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl AttnProj {
    pub fn bind(scope: &ParamScope) -> Result<Self> {
        Ok(AttnProj {
            q: Linear::bind(scope, "q_proj")?,
            k: Linear::bind(scope, "k_proj")?,
            v: Linear::bind(scope, "v_proj")?,
            o: Linear::bind(scope, "o_proj")?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BlockParams {
    pub norm1: Norm,
    pub local: AttnProj,
    pub global: AttnProj,
    /// Raw mixing parameter; α = sigmoid(alpha_raw).
    pub alpha_raw: Var,
    pub norm2: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl BlockParams {
    pub fn bind(scope: &ParamScope) -> Result<Self> {
        let p = |s: &str| scope.path(s);
        let (local, global) = (p("local"), p("global"));
        Ok(BlockParams {
            norm1: Norm::bind(scope, "norm1")?,
            local: AttnProj::bind(&scope.child(&local))?,
            global: AttnProj::bind(&scope.child(&global))?,
            alpha_raw: scope.var("alpha_raw")?,
            norm2: Norm::bind(scope, "norm2")?,
            fc1: Linear::bind(scope, "ffn.fc1")?,
            fc2: Linear::bind(scope, "ffn.fc2")?,
        })
    }
}

/// Admissible keys per query: Chebyshev distance ≤ ⌊w/2⌋ on the token grid.
pub fn window_mask(grid_h: usize, grid_w: usize, window: usize) -> Arc<Vec<bool>> {
    let n = grid_h * grid_w;
    let r = window / 2;
    let mut mask = vec![false; n * n];
    for qi in 0..n {
        let (qy, qx) = (qi / grid_w, qi % grid_w);
        for ki in 0..n {
            let (ky, kx) = (ki / grid_w, ki % grid_w);
            mask[qi * n + ki] = qy.abs_diff(ky).max(qx.abs_diff(kx)) <= r;
        }
    }
    Arc::new(mask)
}

/// Result of one attention pass: projected output `[N×D]` and the
/// post-softmax weights `[h×N×N]`.
#[derive(Clone, Copy, Debug)]
pub struct Attended {
    pub output: Var,
    pub weights: Var,
}

/// Split `[N×D]` into heads `[h×N×D/h]`.
fn split_heads<F: Real>(tape: &mut Tape<F>, x: Var, heads: usize) -> Result<Var> {
    let (n, d) = (tape.shape(x)[0], tape.shape(x)[1]);
    let r = tape.reshape(x, &[n, heads, d / heads])?;
    Ok(tape.permute(r, &[1, 0, 2])?)
}

/// Scaled dot-product attention. `mask` restricts keys per query;
/// `key_bias` (`[1×1×N]`) is added to the logits before the softmax.
pub fn attend<F: Real>(
    tape: &mut Tape<F>,
    x: Var,
    proj: &AttnProj,
    heads: usize,
    mask: Option<&Arc<Vec<bool>>>,
    key_bias: Option<Var>,
) -> Result<Attended> {
    let s = tape.shape(x).to_vec();
    let wd = tape.shape(proj.q.weight).to_vec();
    if s.len() != 2 || wd[0] != s[1] {
        return Err(ctl_tensor::TensorError::Shape(format!(
            "tokens {s:?} do not match projection {wd:?}"
        ))
        .into());
    }
    let (n, d) = (s[0], s[1]);
    if d % heads != 0 {
        return contract(format!("dim {d} not divisible by {heads} heads"));
    }
    let q = proj.q.forward(tape, x)?;
    let k = proj.k.forward(tape, x)?;
    let v = proj.v.forward(tape, x)?;
    let (q, k, v) = (
        split_heads(tape, q, heads)?,
        split_heads(tape, k, heads)?,
        split_heads(tape, v, heads)?,
    );
    let logits = tape.bmm(q, k, false, true)?;
    let mut logits = tape.scale(logits, F::one() / F::of((d / heads) as f64).sqrt());
    if let Some(b) = key_bias {
        logits = tape.add(logits, b)?;
    }
    let weights = match mask {
        Some(m) => tape.masked_softmax(logits, m)?,
        None => tape.softmax(logits, 2)?,
    };
    let ctx = tape.bmm(weights, v, false, false)?;
    let ctx = tape.permute(ctx, &[1, 0, 2])?;
    let ctx = tape.reshape(ctx, &[n, d])?;
    let output = proj.o.forward(tape, ctx)?;
    Ok(Attended { output, weights })
}

/// Every token attends to every token.
pub fn full_attention<F: Real>(
    tape: &mut Tape<F>,
    tm: &TokenMap,
    proj: &AttnProj,
    cfg: &AttentionConfig,
) -> Result<Attended> {
    attend(tape, tm.tokens, proj, cfg.heads, None, None)
}

/// Attention restricted to the `window × window` grid neighbourhood.
pub fn local_attention<F: Real>(
    tape: &mut Tape<F>,
    tm: &TokenMap,
    proj: &AttnProj,
    cfg: &AttentionConfig,
    window: usize,
) -> Result<Attended> {
    let mask = window_mask(tm.grid_h, tm.grid_w, window);
    attend(tape, tm.tokens, proj, cfg.heads, Some(&mask), None)
}

/// Mixing weight of the local branch in block `index`: α on local-preferred
/// blocks, 1 − α otherwise.
pub fn branch_weight<F: Real>(
    tape: &mut Tape<F>,
    alpha: Var,
    index: usize,
    cfg: &AttentionConfig,
) -> Var {
    if cfg.prefers_local(index) {
        alpha
    } else {
        let neg = tape.neg(alpha);
        tape.add_scalar(neg, F::one())
    }
}

/// `β·local + (1 − β)·global` with β from [`branch_weight`].
pub fn interact<F: Real>(
    tape: &mut Tape<F>,
    local: Var,
    global: Var,
    alpha: Var,
    index: usize,
    cfg: &AttentionConfig,
) -> Result<Var> {
    if tape.shape(local) != tape.shape(global) {
        return Err(ctl_tensor::TensorError::Shape(format!(
            "local branch {:?} and global branch {:?} differ",
            tape.shape(local),
            tape.shape(global)
        ))
        .into());
    }
    let beta = branch_weight(tape, alpha, index, cfg);
    let neg = tape.neg(beta);
    let rest = tape.add_scalar(neg, F::one());
    let a = tape.mul(local, beta)?;
    let b = tape.mul(global, rest)?;
    Ok(tape.add(a, b)?)
}

/// Diagnostics of one block: the weights of both branches.
#[derive(Clone, Copy, Debug)]
pub struct BlockTrace {
    pub local_weights: Var,
    pub global_weights: Var,
}

/// Pre-norm block: gated local/global attention blended into the residual
/// stream by the gates, followed by a residual GELU feed-forward.
pub fn transformer_block<F: Real>(
    tape: &mut Tape<F>,
    tm: &TokenMap,
    params: &BlockParams,
    gates: &GateVector,
    strength: f64,
    cfg: &AttentionConfig,
    index: usize,
) -> Result<(TokenMap, BlockTrace)> {
    if gates.len != tm.len() {
        return contract(format!(
            "gate vector of length {} for {} tokens",
            gates.len,
            tm.len()
        ));
    }
    let x = tm.tokens;
    let h = params.norm1.forward(tape, x)?;
    let key_bias = gate_bias(tape, gates, strength)?;
    let mask = window_mask(tm.grid_h, tm.grid_w, cfg.window);
    let local = attend(tape, h, &params.local, cfg.heads, Some(&mask), key_bias)?;
    let global = attend(tape, h, &params.global, cfg.heads, None, key_bias)?;
    let alpha = tape.sigmoid(params.alpha_raw);
    let mixed = interact(tape, local.output, global.output, alpha, index, cfg)?;
    let attn_out = tape.add(x, mixed)?;
    let x1 = blend_residual(tape, attn_out, x, gates)?;

    let h2 = params.norm2.forward(tape, x1)?;
    let f = params.fc1.forward(tape, h2)?;
    let f = tape.gelu(f);
    let f = params.fc2.forward(tape, f)?;
    let out = tape.add(x1, f)?;
    Ok((
        TokenMap::new(tape, out, tm.grid_h, tm.grid_w, tm.scale_tag)?,
        BlockTrace {
            local_weights: local.weights,
            global_weights: global.weights,
        },
    ))
}
