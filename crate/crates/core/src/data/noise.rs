use std::collections::BTreeSet;

use ctl_tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{SliceImage, SliceKind, PIXEL_MAX};
use crate::error::{contract, Result};

const GAUSS_STREAM: u64 = 0x6A55;
const STREAK_STREAM: u64 = 0x57EA;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSpec {
    pub gaussian_sigma: f64,
    pub streak_count: usize,
    pub streak_amplitude: f64,
    /// Streak angle range in radians.
    pub streak_angle_range: (f64, f64),
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            gaussian_sigma: 15.0,
            streak_count: 4,
            streak_amplitude: 25.0,
            streak_angle_range: (0.0, std::f64::consts::PI),
            seed: 0,
        }
    }
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.gaussian_sigma >= 0.0 && self.streak_amplitude >= 0.0) {
            return contract("noise amplitudes must be ≥ 0");
        }
        let (lo, hi) = self.streak_angle_range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return contract("streak angle range must be finite with lo ≤ hi");
        }
        Ok(())
    }
}

/// A 1-pixel-wide stripe between two endpoints with a signed amplitude.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Segment {
    pub y0: f64,
    pub x0: f64,
    pub y1: f64,
    pub x1: f64,
    pub amplitude: f64,
}

impl Segment {
    /// Row-major indices of the in-bounds pixels the stripe touches, each once.
    pub fn pixels(&self, h: usize, w: usize) -> BTreeSet<usize> {
        let (dy, dx) = (self.y1 - self.y0, self.x1 - self.x0);
        let steps = dy.abs().max(dx.abs()).ceil().max(1.0) as usize;
        let mut out = BTreeSet::new();
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            let y = (self.y0 + t * dy).round();
            let x = (self.x0 + t * dx).round();
            if y >= 0.0 && x >= 0.0 && (y as usize) < h && (x as usize) < w {
                out.insert(y as usize * w + x as usize);
            }
        }
        out
    }
}

/// The stripes `inject_noise` draws for an `h×w` slice under `spec`.
pub fn streak_segments(spec: &NoiseSpec, h: usize, w: usize) -> Vec<Segment> {
    let mut rng = crate::rng::stream(spec.seed, STREAK_STREAM, 0);
    let (lo, hi) = spec.streak_angle_range;
    let span = h.max(w) as f64;
    (0..spec.streak_count)
        .map(|_| {
            let cy = rng.random_range(0.0..h as f64);
            let cx = rng.random_range(0.0..w as f64);
            let angle = if hi > lo {
                rng.random_range(lo..hi)
            } else {
                lo
            };
            let half = 0.5 * rng.random_range(0.5 * span..=span);
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let (s, c) = angle.sin_cos();
            Segment {
                y0: cy - half * s,
                x0: cx - half * c,
                y1: cy + half * s,
                x1: cx + half * c,
                amplitude: sign * spec.streak_amplitude,
            }
        })
        .collect()
}

/// Gaussian noise, then stripes, then clipping to [0, 255].
pub fn inject_noise(clean: &SliceImage, spec: &NoiseSpec) -> Result<SliceImage> {
    if clean.kind != SliceKind::Clean {
        return contract(format!(
            "inject_noise needs a clean slice, got {}",
            clean.kind
        ));
    }
    spec.validate()?;
    let (h, w) = (clean.height(), clean.width());
    let mut img: Vec<f64> = clean.pixels().data().iter().map(|&v| v as f64).collect();
    if spec.gaussian_sigma > 0.0 {
        let mut rng = crate::rng::stream(spec.seed, GAUSS_STREAM, 0);
        for p in img.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *p += spec.gaussian_sigma * z;
        }
    }
    for seg in streak_segments(spec, h, w) {
        for i in seg.pixels(h, w) {
            img[i] += seg.amplitude;
        }
    }
    let data = img
        .iter()
        .map(|&v| v.clamp(0.0, PIXEL_MAX as f64) as f32)
        .collect();
    SliceImage::new(
        Tensor::new(&[1, h, w], data)?,
        clean.patient_id.clone(),
        clean.slice_index,
        SliceKind::Noisy,
    )
}
