use ctl_tensor::Tensor;
use rand::Rng;

use super::{SliceImage, SliceKind, PIXEL_MAX};
use crate::error::{contract, Result};

/// Width in pixels of the linear edge ramp.
pub const EDGE_RAMP: f64 = 2.0;

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub size: usize,
    /// Inclusive range of ellipse counts.
    pub ellipses: (usize, usize),
    /// Inclusive range of ellipse intensities.
    pub intensity: (f64, f64),
    pub background: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            size: 128,
            ellipses: (4, 10),
            intensity: (40.0, 220.0),
            background: 20.0,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 8 {
            return contract(format!("phantom size {} below 8", self.size));
        }
        if self.ellipses.0 > self.ellipses.1 {
            return contract("ellipse count range is empty");
        }
        let (lo, hi) = self.intensity;
        let ok = |v: f64| (0.0..=PIXEL_MAX as f64).contains(&v);
        if !(ok(lo) && ok(hi) && lo <= hi && ok(self.background)) {
            return contract("phantom intensities must lie in [0, 255] with lo ≤ hi");
        }
        Ok(())
    }
}

/// A rotated ellipse with its painted intensity.
#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    theta: f64,
    value: f64,
}

impl Ellipse {
    fn sample<R: Rng>(rng: &mut R, spec: &PhantomSpec) -> Self {
        let n = spec.size as f64;
        let a = rng.random_range(0.05 * n..=0.3 * n);
        let b = rng.random_range(0.05 * n..=0.3 * n);
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let (s, c) = theta.sin_cos();
        // Half extents of the rotated ellipse plus ramp, kept inside the image.
        let ex = (a * a * c * c + b * b * s * s).sqrt() + EDGE_RAMP;
        let ey = (a * a * s * s + b * b * c * c).sqrt() + EDGE_RAMP;
        let cx = rng.random_range(ex..=(n - 1.0 - ex).max(ex));
        let cy = rng.random_range(ey..=(n - 1.0 - ey).max(ey));
        let value = rng.random_range(spec.intensity.0..=spec.intensity.1);
        Ellipse {
            cy,
            cx,
            a,
            b,
            theta,
            value,
        }
    }

    /// Fraction of the pixel at `(y, x)` inside the ellipse, with a linear
    /// ramp of width [`EDGE_RAMP`] across the boundary.
    fn coverage(&self, y: f64, x: f64) -> f64 {
        let (s, c) = self.theta.sin_cos();
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        let r = ((u / self.a).powi(2) + (v / self.b).powi(2)).sqrt();
        let dist = (dx * dx + dy * dy).sqrt();
        // Approximate signed distance to the boundary along the ray.
        let signed = if r > 0.0 {
            (r - 1.0) * dist / r
        } else {
            -self.a.min(self.b)
        };
        (0.5 - signed / EDGE_RAMP).clamp(0.0, 1.0)
    }
}

/// Background plus constant-intensity ellipses painted in order.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<SliceImage> {
    generate_phantom_as(spec, "phantom", 0)
}

pub fn generate_phantom_as(
    spec: &PhantomSpec,
    patient_id: &str,
    slice_index: u32,
) -> Result<SliceImage> {
    spec.validate()?;
    let mut rng = crate::rng::stream(spec.seed, 0xE11, 0);
    let count = rng.random_range(spec.ellipses.0..=spec.ellipses.1);
    let shapes: Vec<Ellipse> = (0..count)
        .map(|_| Ellipse::sample(&mut rng, spec))
        .collect();
    let n = spec.size;
    let mut img = vec![spec.background; n * n];
    for e in &shapes {
        for y in 0..n {
            for x in 0..n {
                let cov = e.coverage(y as f64, x as f64);
                if cov > 0.0 {
                    let p = &mut img[y * n + x];
                    *p += cov * (e.value - *p);
                }
            }
        }
    }
    let pixels = Tensor::new(
        &[1, n, n],
        img.iter()
            .map(|&v| v.clamp(0.0, PIXEL_MAX as f64) as f32)
            .collect(),
    )?;
    SliceImage::new(pixels, patient_id, slice_index, SliceKind::Clean)
}
