//! Image-quality metrics on a [0, 255] display scale and the comparison
//! table renderer.

use std::fmt::Write as _;

use ctl_tensor::Tensor;

use crate::error::{contract, Result};

pub const DISPLAY_PEAK: f64 = 255.0;

/// Linear display window `[lo, hi] → [0, 255]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DisplayWindow {
    pub lo: f64,
    pub hi: f64,
}

impl Default for DisplayWindow {
    /// Slices are stored in display units already, so the default window is
    /// the identity on [0, 255].
    fn default() -> Self {
        DisplayWindow {
            lo: 0.0,
            hi: DISPLAY_PEAK,
        }
    }
}

/// `255·clip((x − lo)/(hi − lo), 0, 1)`.
pub fn window_to_display(image: &Tensor, lo: f64, hi: f64) -> Result<Tensor> {
    if !(hi > lo) {
        return contract(format!("display window hi {hi} must exceed lo {lo}"));
    }
    Ok(image.map(|x| {
        let u = ((x as f64 - lo) / (hi - lo)).clamp(0.0, 1.0);
        (DISPLAY_PEAK * u) as f32
    }))
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(ctl_tensor::TensorError::Shape(format!(
            "metric inputs {:?} and {:?} differ",
            a.shape(),
            b.shape()
        ))
        .into());
    }
    Ok(())
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(s / a.numel() as f64)
}

pub fn rmse(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(mse(a, b)?.sqrt())
}

/// PSNR in dB from an MSE; identical images give `f64::INFINITY`.
pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

/// `10·log₁₀(peak²/MSE)`; `f64::INFINITY` is the sentinel for MSE = 0.
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?, peak))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    pub k1: f64,
    pub k2: f64,
    pub range: f64,
    pub window: usize,
    pub sigma: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            k1: 0.01,
            k2: 0.03,
            range: DISPLAY_PEAK,
            window: 11,
            sigma: 1.5,
        }
    }
}

fn gaussian(n: usize, sigma: f64) -> Vec<f64> {
    let c = (n as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..n)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of an `h×w` plane.
fn filter(img: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let n = g.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|k| g[k] * img[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|k| g[k] * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

fn plane(t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [h, w] | [1, h, w] => Ok((h, w)),
        ref s => contract(format!("SSIM needs a single-channel image, got {s:?}")),
    }
}

pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    ssim_with(a, b, &SsimParams::default())
}

/// Mean SSIM over every valid Gaussian-window position.
pub fn ssim_with(a: &Tensor, b: &Tensor, p: &SsimParams) -> Result<f64> {
    same_shape(a, b)?;
    let (h, w) = plane(a)?;
    if h < p.window || w < p.window {
        return contract(format!(
            "image {h}×{w} smaller than the {}×{} SSIM window",
            p.window, p.window
        ));
    }
    let g = gaussian(p.window, p.sigma);
    let x: Vec<f64> = a.data().iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = b.data().iter().map(|&v| v as f64).collect();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(u, v)| u * v).collect();
    let (mx, my) = (filter(&x, h, w, &g), filter(&y, h, w, &g));
    let (sxx, syy, sxy) = (
        filter(&xx, h, w, &g),
        filter(&yy, h, w, &g),
        filter(&xy, h, w, &g),
    );
    let c1 = (p.k1 * p.range).powi(2);
    let c2 = (p.k2 * p.range).powi(2);
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let vx = sxx[i] - ux * ux;
        let vy = syy[i] - uy * uy;
        let cov = sxy[i] - ux * uy;
        total +=
            ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    Ok(total / mx.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageMetrics {
    pub ssim: f64,
    pub rmse: f64,
    /// `f64::INFINITY` when the images are identical.
    pub psnr: f64,
}

impl ImageMetrics {
    /// Metrics of `image` against `reference`, both mapped through `window`.
    pub fn compare(image: &Tensor, reference: &Tensor, window: DisplayWindow) -> Result<Self> {
        let a = window_to_display(image, window.lo, window.hi)?;
        let b = window_to_display(reference, window.lo, window.hi)?;
        let m = mse(&a, &b)?;
        Ok(ImageMetrics {
            ssim: ssim(&a, &b)?,
            rmse: m.sqrt(),
            psnr: psnr_from_mse(m, DISPLAY_PEAK),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub window: DisplayWindow,
    pub per_image: Vec<(String, ImageMetrics)>,
    pub mean: ImageMetrics,
}

impl MetricReport {
    pub fn new(window: DisplayWindow, per_image: Vec<(String, ImageMetrics)>) -> Result<Self> {
        if per_image.is_empty() {
            return contract("metric report needs at least one image");
        }
        let n = per_image.len() as f64;
        let avg =
            |f: fn(&ImageMetrics) -> f64| per_image.iter().map(|(_, m)| f(m)).sum::<f64>() / n;
        let mean = ImageMetrics {
            ssim: avg(|m| m.ssim),
            rmse: avg(|m| m.rmse),
            psnr: avg(|m| m.psnr),
        };
        Ok(MetricReport {
            window,
            per_image,
            mean,
        })
    }

    pub fn count(&self) -> usize {
        self.per_image.len()
    }

    /// Per-image rows followed by the mean row.
    pub fn rows(&self, params: &str) -> Vec<TableRow> {
        self.per_image
            .iter()
            .map(|(name, m)| TableRow::new(name.clone(), m, params))
            .chain(std::iter::once(TableRow::new("mean", &self.mean, params)))
            .collect()
    }
}

/// One line of the comparison table.
#[derive(Clone, Debug, PartialEq)]
pub struct TableRow {
    pub name: String,
    pub ssim: f64,
    pub rmse: f64,
    pub params: String,
}

impl TableRow {
    pub fn new(name: impl Into<String>, m: &ImageMetrics, params: &str) -> Self {
        TableRow {
            name: name.into(),
            ssim: m.ssim,
            rmse: m.rmse,
            params: params.to_string(),
        }
    }
}

/// Decimal rounding to `places`, ties away from zero, applied to the
/// shortest decimal representation of `v` (so 0.91405 → 0.9141).
pub fn round_half_away(v: f64, places: usize) -> String {
    if !v.is_finite() {
        return if v.is_nan() {
            "NaN".into()
        } else if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    let text = format!("{}", v.abs());
    let (int, frac) = text.split_once('.').unwrap_or((&text, ""));
    let mut digits: Vec<u8> = int
        .bytes()
        .chain(frac.bytes().chain(std::iter::repeat(b'0')).take(places))
        .map(|b| b - b'0')
        .collect();
    if frac.as_bytes().get(places).is_some_and(|&d| d >= b'5') {
        let mut i = digits.len();
        loop {
            if i == 0 {
                digits.insert(0, 1);
                break;
            }
            i -= 1;
            if digits[i] == 9 {
                digits[i] = 0;
            } else {
                digits[i] += 1;
                break;
            }
        }
    }
    let split = digits.len() - places;
    let mut out = String::new();
    if v < 0.0 && digits.iter().any(|&d| d != 0) {
        out.push('-');
    }
    out.extend(digits[..split].iter().map(|d| (b'0' + d) as char));
    if places > 0 {
        out.push('.');
        out.extend(digits[split..].iter().map(|d| (b'0' + d) as char));
    }
    out
}

const HEADER: [&str; 4] = ["Method", "SSIM", "RMSE", "params"];

fn cells(rows: &[TableRow]) -> Vec<[String; 4]> {
    rows.iter()
        .map(|r| {
            [
                r.name.clone(),
                round_half_away(r.ssim, 4),
                round_half_away(r.rmse, 4),
                r.params.clone(),
            ]
        })
        .collect()
}

/// Pipe-separated text table, rows in the order given.
pub fn report_table(rows: &[TableRow]) -> String {
    let body = cells(rows);
    let mut width = HEADER.map(str::len);
    for row in &body {
        for (w, c) in width.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cols: [&str; 4]| {
        let mut s = String::new();
        for (i, (c, w)) in cols.iter().zip(width).enumerate() {
            if i > 0 {
                s.push_str(" | ");
            }
            let _ = write!(s, "{c:<w$}");
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = line(HEADER);
    let rule: Vec<String> = width.iter().map(|&w| "-".repeat(w)).collect();
    out.push_str(&rule.join("-|-"));
    out.push('\n');
    for row in &body {
        out.push_str(&line([&row[0], &row[1], &row[2], &row[3]]));
    }
    out
}

/// Same columns as [`report_table`], comma-separated with a header row.
pub fn report_csv(rows: &[TableRow]) -> String {
    let mut out = HEADER.join(",") + "\n";
    for row in cells(rows) {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}
