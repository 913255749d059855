//! Convolutional stem, two-scale feature extraction and the Token2Token
//! soft split into an embedded token grid (plus its fold-based inverse).

use ctl_tensor::{PatchGeometry, Real, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::layers::{Conv, Linear, ParamScope};

/// Kernel size of the single stem convolution.
pub const STEM_KERNEL: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizerConfig {
    pub stem_channels: usize,
    pub fine_kernel: usize,
    pub coarse_kernel: usize,
    pub unfold_kernel: usize,
    pub unfold_stride: usize,
    pub unfold_pad: usize,
    pub embed_dim: usize,
    /// Hidden width of the patch↔token projections; 0 means a single linear map.
    pub token_hidden: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            stem_channels: 32,
            fine_kernel: 3,
            coarse_kernel: 5,
            unfold_kernel: 7,
            unfold_stride: 2,
            unfold_pad: 3,
            embed_dim: 64,
            token_hidden: 224,
        }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stem_channels == 0 || self.embed_dim == 0 {
            return contract("stem_channels and embed_dim must be positive");
        }
        if self.fine_kernel >= self.coarse_kernel {
            return contract(format!(
                "fine_kernel {} must be smaller than coarse_kernel {}",
                self.fine_kernel, self.coarse_kernel
            ));
        }
        if self.fine_kernel.is_multiple_of(2) || self.coarse_kernel.is_multiple_of(2) {
            return contract("branch kernels must be odd to preserve spatial size");
        }
        if self.unfold_stride == 0 || self.unfold_stride > self.unfold_kernel {
            return contract(format!(
                "unfold_stride {} must be in 1..={} so patches overlap",
                self.unfold_stride, self.unfold_kernel
            ));
        }
        Ok(())
    }

    /// Channels entering the soft split: fine and coarse maps concatenated.
    pub fn fused_channels(&self) -> usize {
        2 * self.stem_channels
    }

    pub fn patch_len(&self) -> usize {
        self.fused_channels() * self.unfold_kernel * self.unfold_kernel
    }

    /// Soft-split geometry over a fused `h×w` feature map.
    pub fn geometry(&self, h: usize, w: usize) -> Result<PatchGeometry> {
        Ok(PatchGeometry::new(
            self.fused_channels(),
            h,
            w,
            self.unfold_kernel,
            self.unfold_stride,
            self.unfold_pad,
        )?)
    }

    pub fn token_grid(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let g = self.geometry(h, w)?;
        Ok((g.out_h(), g.out_w()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScaleTag {
    Fine,
    Coarse,
    /// Fine and coarse branches fused before the soft split.
    MultiScale,
}

/// Embedded tokens `[N×D]` laid out row-major on a `grid_h × grid_w` grid.
#[derive(Clone, Copy, Debug)]
pub struct TokenMap {
    pub tokens: Var,
    pub grid_h: usize,
    pub grid_w: usize,
    pub scale_tag: ScaleTag,
}

impl TokenMap {
    pub fn new<F: Real>(
        tape: &Tape<F>,
        tokens: Var,
        grid_h: usize,
        grid_w: usize,
        scale_tag: ScaleTag,
    ) -> Result<Self> {
        let s = tape.shape(tokens);
        if s.len() != 2 || s[0] != grid_h * grid_w {
            return contract(format!(
                "token tensor {s:?} does not match grid {grid_h}×{grid_w}"
            ));
        }
        Ok(TokenMap {
            tokens,
            grid_h,
            grid_w,
            scale_tag,
        })
    }

    pub fn len(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Patch → token (and token → patch) map: one linear layer, or two with a
/// GELU in between.
#[derive(Clone, Copy, Debug)]
pub enum Projection {
    Linear(Linear),
    Mlp(Linear, Linear),
}

impl Projection {
    pub fn bind(scope: &ParamScope, hidden: usize) -> Result<Self> {
        if hidden == 0 {
            Ok(Projection::Linear(Linear::bind(scope, "proj")?))
        } else {
            Ok(Projection::Mlp(
                Linear::bind(scope, "fc1")?,
                Linear::bind(scope, "fc2")?,
            ))
        }
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, x: Var) -> Result<Var> {
        match self {
            Projection::Linear(l) => l.forward(tape, x),
            Projection::Mlp(a, b) => {
                let h = a.forward(tape, x)?;
                let h = tape.gelu(h);
                b.forward(tape, h)
            }
        }
    }
}

fn spatial<F: Real>(tape: &Tape<F>, v: Var) -> Result<(usize, usize, usize)> {
    match *tape.shape(v) {
        [c, h, w] => Ok((c, h, w)),
        ref s => contract(format!("expected a [C×H×W] map, got {s:?}")),
    }
}

/// Stem convolution: `[1×H×W]` → `[stem_channels×H×W]`, no activation.
pub fn embed_stem<F: Real>(
    tape: &mut Tape<F>,
    image: Var,
    stem: &Conv,
    cfg: &TokenizerConfig,
) -> Result<Var> {
    let (c, h, w) = spatial(tape, image)?;
    if c != 1 {
        return contract(format!(
            "stem expects a single-channel image, got {c} channels"
        ));
    }
    if h < cfg.coarse_kernel || w < cfg.coarse_kernel {
        return Err(ctl_tensor::TensorError::Shape(format!(
            "image {h}×{w} smaller than coarse kernel {}",
            cfg.coarse_kernel
        ))
        .into());
    }
    stem.forward(tape, image)
}

/// Parallel fine/coarse convolutions, each followed by GELU. Spatial size is
/// preserved.
pub fn multi_scale_features<F: Real>(
    tape: &mut Tape<F>,
    feat: Var,
    fine: &Conv,
    coarse: &Conv,
) -> Result<(Var, Var)> {
    let f = fine.forward(tape, feat)?;
    let c = coarse.forward(tape, feat)?;
    Ok((tape.gelu(f), tape.gelu(c)))
}

/// Concatenate `[fine; coarse]` along channels (fine first), soft-split with
/// the configured unfold, and project every patch row to `embed_dim`.
pub fn tokenize<F: Real>(
    tape: &mut Tape<F>,
    fine: Var,
    coarse: Var,
    proj: &Projection,
    cfg: &TokenizerConfig,
) -> Result<TokenMap> {
    let (sf, sc) = (spatial(tape, fine)?, spatial(tape, coarse)?);
    if sf != sc {
        return Err(ctl_tensor::TensorError::Shape(format!(
            "fine branch {sf:?} and coarse branch {sc:?} differ"
        ))
        .into());
    }
    let fused = tape.concat(&[fine, coarse], 0)?;
    let geom = cfg.geometry(sf.1, sf.2)?;
    let patches = tape.unfold_geom(fused, geom)?;
    let tokens = proj.forward(tape, patches)?;
    TokenMap::new(
        tape,
        tokens,
        geom.out_h(),
        geom.out_w(),
        ScaleTag::MultiScale,
    )
}

/// Back-project tokens to patch space and fold to `[fused_channels×H×W]`,
/// dividing by the overlap count so the soft split is inverted exactly.
pub fn detokenize<F: Real>(
    tape: &mut Tape<F>,
    tm: &TokenMap,
    target: (usize, usize),
    back: &Projection,
    cfg: &TokenizerConfig,
) -> Result<Var> {
    let geom = cfg.geometry(target.0, target.1)?;
    if (geom.out_h(), geom.out_w()) != (tm.grid_h, tm.grid_w) {
        return Err(ctl_tensor::TensorError::Shape(format!(
            "token grid {}×{} inconsistent with target {}×{} (expected {}×{})",
            tm.grid_h,
            tm.grid_w,
            target.0,
            target.1,
            geom.out_h(),
            geom.out_w()
        ))
        .into());
    }
    let patches = back.forward(tape, tm.tokens)?;
    let folded = tape.fold(patches, geom)?;
    let inv = geom.count_map::<F>().map(|c| {
        if c > F::zero() {
            F::one() / c
        } else {
            F::zero()
        }
    });
    let inv = tape.constant(inv);
    Ok(tape.mul(folded, inv)?)
}
