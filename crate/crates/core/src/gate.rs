//! Noise-aware attention control: per-token noise statistics of the input
//! tile, a small fully connected network mapping them to gates in (0, 1),
//! and the two places the gates act (attention logits and residual blend).

use ctl_tensor::{PatchGeometry, Real, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::layers::{Linear, ParamScope};
use crate::tokenizer::TokenizerConfig;

/// Keeps `ln(g + ε)` finite as gates approach zero.
pub const GATE_EPS: f64 = 1e-6;

/// Descriptor features per token: Laplacian std, intensity std.
pub const NOISE_FEATURES: usize = 2;

/// Gate value used when gating is disabled.
pub const NEUTRAL_GATE: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    pub enabled: bool,
    /// λ, the weight of the log-gate bias on attention logits.
    pub strength: f64,
    pub hidden: usize,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            enabled: true,
            strength: 1.0,
            hidden: 16,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return contract("gate hidden width must be at least 1");
        }
        if !(self.strength >= 0.0) {
            return contract(format!("gate strength {} must be ≥ 0", self.strength));
        }
        Ok(())
    }
}

/// Per-token statistics `[N×F]`, non-negative and finite.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDescriptor<F: Real = f32> {
    pub values: Tensor<F>,
}

/// Gates `[N×1]`, each strictly inside (0, 1).
#[derive(Clone, Copy, Debug)]
pub struct GateVector {
    pub g: Var,
    pub len: usize,
}

/// Two-layer gate network `F → hidden → 1` with tanh then sigmoid.
#[derive(Clone, Copy, Debug)]
pub struct GateNet {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl GateNet {
    pub fn bind(scope: &ParamScope) -> Result<Self> {
        Ok(GateNet {
            fc1: Linear::bind(scope, "fc1")?,
            fc2: Linear::bind(scope, "fc2")?,
        })
    }
}

/// 3×3 Laplacian with edge-replicated borders, so constant regions map to 0.
fn laplacian(img: &[f64], h: usize, w: usize) -> Vec<f64> {
    let at = |y: isize, x: isize| {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        img[y * w + x]
    };
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            out[y as usize * w + x as usize] =
                at(y - 1, x) + at(y + 1, x) + at(y, x - 1) + at(y, x + 1) - 4.0 * at(y, x);
        }
    }
    out
}

/// Population std over a window. Values are taken relative to the window's
/// first sample so a constant window yields exactly 0.
fn window_std(img: &[f64], w: usize, (y0, y1, x0, x1): (usize, usize, usize, usize)) -> f64 {
    let n = ((y1 - y0) * (x1 - x0)) as f64;
    let origin = img[y0 * w + x0];
    let rows = || (y0..y1).flat_map(|y| img[y * w + x0..y * w + x1].iter().map(|v| v - origin));
    let mean = rows().sum::<f64>() / n;
    let var = rows().map(|v| (v - mean) * (v - mean)).sum::<f64>();
    (var / n).sqrt()
}

/// Noise statistics over each token's receptive window in the raw tile
/// (padding excluded): population std of the Laplacian-filtered tile and of
/// the intensities.
pub fn estimate_noise<F: Real>(
    tile: &Tensor<F>,
    token_grid: (usize, usize),
    cfg: &TokenizerConfig,
) -> Result<NoiseDescriptor<F>> {
    let (h, w) = match *tile.shape() {
        [1, h, w] => (h, w),
        ref s => return contract(format!("noise estimation needs a [1×H×W] tile, got {s:?}")),
    };
    let geom = PatchGeometry::new(
        1,
        h,
        w,
        cfg.unfold_kernel,
        cfg.unfold_stride,
        cfg.unfold_pad,
    )?;
    if (geom.out_h(), geom.out_w()) != token_grid {
        return contract(format!(
            "token grid {token_grid:?} inconsistent with {h}×{w} tile (expected {}×{})",
            geom.out_h(),
            geom.out_w()
        ));
    }
    let img: Vec<f64> = tile.data().iter().map(|v| v.as_f64()).collect();
    let lap = laplacian(&img, h, w);
    let mut values = Vec::with_capacity(geom.num_patches() * NOISE_FEATURES);
    for oy in 0..geom.out_h() {
        for ox in 0..geom.out_w() {
            let win = geom.window(oy, ox);
            values.push(F::of(window_std(&lap, w, win)));
            values.push(F::of(window_std(&img, w, win)));
        }
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(crate::Error::NonFinite("noise descriptor".into()));
    }
    Ok(NoiseDescriptor {
        values: Tensor::new(&[geom.num_patches(), NOISE_FEATURES], values)?,
    })
}

/// `g = sigmoid(W₂·tanh(W₁·d + b₁) + b₂)` per token.
pub fn compute_gates<F: Real>(tape: &mut Tape<F>, desc: Var, net: &GateNet) -> Result<GateVector> {
    let (ds, ws) = (
        tape.shape(desc).to_vec(),
        tape.shape(net.fc1.weight).to_vec(),
    );
    if ds.len() != 2 || ds[1] != ws[0] {
        return Err(ctl_tensor::TensorError::Shape(format!(
            "descriptor {ds:?} does not match gate input width {}",
            ws[0]
        ))
        .into());
    }
    let h = net.fc1.forward(tape, desc)?;
    let h = tape.tanh(h);
    let z = net.fc2.forward(tape, h)?;
    let g = tape.sigmoid(z);
    Ok(GateVector { g, len: ds[0] })
}

/// Constant gates of value 0.5 for every token (gating disabled).
pub fn neutral_gates<F: Real>(tape: &mut Tape<F>, len: usize) -> GateVector {
    let g = tape.constant(Tensor::full(&[len, 1], F::of(NEUTRAL_GATE)));
    GateVector { g, len }
}

/// `logits + λ·ln(g_j + ε)` broadcast over heads and queries: key `j`'s
/// share of every query's attention is scaled by its gate.
pub fn apply_gates<F: Real>(
    tape: &mut Tape<F>,
    logits: Var,
    gates: &GateVector,
    strength: f64,
) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    if s.len() != 3 || s[1] != gates.len || s[2] != gates.len {
        return Err(ctl_tensor::TensorError::Shape(format!(
            "logits {s:?} incompatible with {} gates",
            gates.len
        ))
        .into());
    }
    match gate_bias(tape, gates, strength)? {
        Some(bias) => Ok(tape.add(logits, bias)?),
        None => Ok(logits),
    }
}

/// Key bias `λ·ln(g + ε)` shaped `[1×1×N]`, or `None` when λ = 0.
pub fn gate_bias<F: Real>(
    tape: &mut Tape<F>,
    gates: &GateVector,
    strength: f64,
) -> Result<Option<Var>> {
    if !(strength >= 0.0) {
        return contract(format!("gate strength {strength} must be ≥ 0"));
    }
    if strength == 0.0 {
        return Ok(None);
    }
    let shifted = tape.add_scalar(gates.g, F::of(GATE_EPS));
    let l = tape.ln(shifted)?;
    let l = tape.scale(l, F::of(strength));
    Ok(Some(tape.reshape(l, &[1, 1, gates.len])?))
}

/// `g·attn_out + (1 − g)·identity_in`, per token.
pub fn blend_residual<F: Real>(
    tape: &mut Tape<F>,
    attn_out: Var,
    identity_in: Var,
    gates: &GateVector,
) -> Result<Var> {
    let (sa, si) = (
        tape.shape(attn_out).to_vec(),
        tape.shape(identity_in).to_vec(),
    );
    if sa != si || sa.len() != 2 || sa[0] != gates.len {
        return Err(ctl_tensor::TensorError::Shape(format!(
            "blend of {sa:?} and {si:?} with {} gates",
            gates.len
        ))
        .into());
    }
    let neg = tape.neg(gates.g);
    let rest = tape.add_scalar(neg, F::one());
    let a = tape.mul(attn_out, gates.g)?;
    let b = tape.mul(identity_in, rest)?;
    Ok(tape.add(a, b)?)
}
