//! Overlapping tiled inference: tile plans with clamped final origins,
//! blend windows, and weighted overlap-add stitching.

use std::fmt;
use std::str::FromStr;

use ctl_tensor::Tensor;
use rayon::prelude::*;

use crate::error::{contract, Error, Result};
use crate::model::Model;

/// Smallest cosine-window weight; keeps every covered pixel's weight positive.
pub const COSINE_FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Blend {
    Uniform,
    #[default]
    Cosine,
}

impl FromStr for Blend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Blend::Uniform),
            "cosine" => Ok(Blend::Cosine),
            other => contract(format!("unknown blend mode {other:?} (uniform|cosine)")),
        }
    }
}

impl fmt::Display for Blend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Blend::Uniform => "uniform",
            Blend::Cosine => "cosine",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TilePlan {
    pub height: usize,
    pub width: usize,
    pub tile: usize,
    pub stride: usize,
    /// `(row, col)` tile origins, row-major.
    pub origins: Vec<(usize, usize)>,
    pub blend: Blend,
}

/// Origins along one axis: multiples of `stride`, plus `len − tile` if the
/// last multiple leaves pixels uncovered.
pub fn axis_origins(len: usize, tile: usize, stride: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..)
        .map(|i| i * stride)
        .take_while(|&o| o + tile <= len)
        .collect();
    if out.last().is_some_and(|&o| o + tile < len) {
        out.push(len - tile);
    }
    out
}

/// Plan with the default cosine blend.
pub fn plan(height: usize, width: usize, tile: usize, stride: usize) -> Result<TilePlan> {
    if tile == 0 || tile > height || tile > width {
        return contract(format!("tile {tile} does not fit a {height}×{width} image"));
    }
    if stride == 0 || stride > tile {
        return contract(format!("stride {stride} must be in 1..={tile}"));
    }
    let rows = axis_origins(height, tile, stride);
    let cols = axis_origins(width, tile, stride);
    let origins = rows
        .iter()
        .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
        .collect();
    Ok(TilePlan {
        height,
        width,
        tile,
        stride,
        origins,
        blend: Blend::default(),
    })
}

impl TilePlan {
    pub fn with_blend(mut self, blend: Blend) -> Self {
        self.blend = blend;
        self
    }

    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    /// Number of tiles covering each pixel, row-major.
    pub fn coverage(&self) -> Vec<u32> {
        let mut cov = vec![0u32; self.height * self.width];
        for &(r, c) in &self.origins {
            for y in r..r + self.tile {
                for x in c..c + self.tile {
                    cov[y * self.width + x] += 1;
                }
            }
        }
        cov
    }
}

/// Separable 1-D blend profile of length `tile`.
pub fn blend_profile(tile: usize, blend: Blend) -> Vec<f64> {
    match blend {
        Blend::Uniform => vec![1.0; tile],
        Blend::Cosine => (0..tile)
            .map(|i| {
                let phase = 2.0 * std::f64::consts::PI * (i as f64 + 0.5) / tile as f64;
                (0.5 - 0.5 * phase.cos()).max(COSINE_FLOOR)
            })
            .collect(),
    }
}

fn image_dims(image: &Tensor) -> Result<(usize, usize)> {
    match *image.shape() {
        [1, h, w] => Ok((h, w)),
        ref s => contract(format!("expected a [1×H×W] image, got {s:?}")),
    }
}

/// Cut the planned tiles out of `image`, in plan order.
pub fn split(image: &Tensor, plan: &TilePlan) -> Result<Vec<Tensor>> {
    let (h, w) = image_dims(image)?;
    if (h, w) != (plan.height, plan.width) {
        return contract(format!(
            "image {h}×{w} does not match plan {}×{}",
            plan.height, plan.width
        ));
    }
    let t = plan.tile;
    let src = image.data();
    plan.origins
        .iter()
        .map(|&(r, c)| {
            let mut data = Vec::with_capacity(t * t);
            for y in r..r + t {
                data.extend_from_slice(&src[y * w + c..y * w + c + t]);
            }
            Ok(Tensor::new(&[1, t, t], data)?)
        })
        .collect()
}

/// `Σ wᵢ·tileᵢ / Σ wᵢ` per pixel, accumulated in f64.
pub fn stitch(tiles: &[Tensor], plan: &TilePlan) -> Result<Tensor> {
    if tiles.len() != plan.origins.len() {
        return contract(format!(
            "{} tiles for a plan of {} origins",
            tiles.len(),
            plan.origins.len()
        ));
    }
    let (h, w, t) = (plan.height, plan.width, plan.tile);
    let prof = blend_profile(t, plan.blend);
    let mut num = vec![0.0f64; h * w];
    let mut den = vec![0.0f64; h * w];
    for (tile, &(r, c)) in tiles.iter().zip(&plan.origins) {
        if tile.shape() != [1, t, t] {
            return contract(format!("tile {:?} is not [1×{t}×{t}]", tile.shape()));
        }
        let d = tile.data();
        for ty in 0..t {
            for tx in 0..t {
                let wgt = prof[ty] * prof[tx];
                let i = (r + ty) * w + c + tx;
                num[i] += wgt * d[ty * t + tx] as f64;
                den[i] += wgt;
            }
        }
    }
    let data = num
        .iter()
        .zip(&den)
        .map(|(&n, &d)| (n / d) as f32)
        .collect();
    Ok(Tensor::new(&[1, h, w], data)?)
}

/// Plan, evaluate `f` on every tile (in parallel), stitch.
pub fn denoise_with<M>(image: &Tensor, plan: &TilePlan, f: M) -> Result<Tensor>
where
    M: Fn(&Tensor) -> Result<Tensor> + Sync,
{
    let tiles = split(image, plan)?;
    let out = tiles.par_iter().map(&f).collect::<Result<Vec<_>>>()?;
    stitch(&out, plan)
}

/// Tiled eval-mode inference with `model`; `tile` must equal the model tile size.
pub fn denoise_image(
    model: &Model,
    image: &Tensor,
    tile: usize,
    stride: usize,
    blend: Blend,
) -> Result<Tensor> {
    if tile != model.config.tile_size {
        return contract(format!(
            "tile {tile} differs from model tile size {}",
            model.config.tile_size
        ));
    }
    let (h, w) = image_dims(image)?;
    let p = plan(h, w, tile, stride)?.with_blend(blend);
    denoise_with(image, &p, |t| model.denoise_tile(t))
}

/// Largest absolute step across the seam lines of `plan` (rows and columns
/// where a tile begins), measured on `image`.
pub fn seam_jump(image: &Tensor, plan: &TilePlan) -> Result<f64> {
    let (h, w) = image_dims(image)?;
    let d = image.data();
    let mut rows: Vec<usize> = plan
        .origins
        .iter()
        .map(|o| o.0)
        .filter(|&r| r > 0)
        .collect();
    let mut cols: Vec<usize> = plan
        .origins
        .iter()
        .map(|o| o.1)
        .filter(|&c| c > 0)
        .collect();
    rows.sort_unstable();
    rows.dedup();
    cols.sort_unstable();
    cols.dedup();
    let mut worst = 0.0f64;
    for &r in &rows {
        for x in 0..w {
            worst = worst.max((d[r * w + x] - d[(r - 1) * w + x]).abs() as f64);
        }
    }
    for &c in &cols {
        for y in 0..h {
            worst = worst.max((d[y * w + c] - d[y * w + c - 1]).abs() as f64);
        }
    }
    Ok(worst)
}
