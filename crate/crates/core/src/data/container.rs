//! Slice container (little-endian):
//!
//! ```text
//! "CTSL" | version u32 | H u32 | W u32 | kind u8 | id_len u32 | patient_id (UTF-8)
//! slice_index u32 | f32×(H·W) row-major
//! ```

use std::fs;
use std::path::Path;

use ctl_tensor::Tensor;

use super::{SliceImage, SliceKind};
use crate::error::{Error, Result};

pub const SLICE_MAGIC: &[u8; 4] = b"CTSL";
pub const SLICE_VERSION: u32 = 1;

/// Multiplier from display units to 16-bit PGM samples (255·257 = 65535).
pub const PGM_SCALE: f32 = 257.0;

pub fn slice_to_bytes(s: &SliceImage) -> Vec<u8> {
    let mut buf = Vec::with_capacity(32 + s.patient_id.len() + 4 * s.pixels().numel());
    buf.extend_from_slice(SLICE_MAGIC);
    for v in [SLICE_VERSION, s.height() as u32, s.width() as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.push(s.kind.code());
    buf.extend_from_slice(&(s.patient_id.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.patient_id.as_bytes());
    buf.extend_from_slice(&s.slice_index.to_le_bytes());
    for v in s.pixels().data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn slice_from_bytes(bytes: &[u8], file: &Path) -> Result<SliceImage> {
    let fail = |detail: String| Error::Integrity {
        file: file.to_path_buf(),
        detail,
    };
    let mut pos = 0usize;
    let mut take = |n: usize, what: &str| -> Result<&[u8]> {
        match pos.checked_add(n).filter(|&e| e <= bytes.len()) {
            Some(end) => {
                let s = &bytes[pos..end];
                pos = end;
                Ok(s)
            }
            None => Err(fail(format!("truncated while reading {what}"))),
        }
    };
    let u32_of = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
    if take(4, "magic")? != SLICE_MAGIC {
        return Err(fail("bad magic (not a CTSL slice)".into()));
    }
    let version = u32_of(take(4, "version")?);
    if version != SLICE_VERSION {
        return Err(Error::Version {
            what: "slice",
            found: version,
            expected: SLICE_VERSION,
        });
    }
    let h = u32_of(take(4, "height")?) as usize;
    let w = u32_of(take(4, "width")?) as usize;
    let code = take(1, "kind")?[0];
    let kind =
        SliceKind::from_code(code).ok_or_else(|| fail(format!("unknown kind code {code}")))?;
    let id_len = u32_of(take(4, "patient id length")?) as usize;
    let patient = std::str::from_utf8(take(id_len, "patient id")?)
        .map_err(|_| fail("patient id is not UTF-8".into()))?
        .to_string();
    let index = u32_of(take(4, "slice index")?);
    let n = h
        .checked_mul(w)
        .filter(|&n| n > 0)
        .ok_or_else(|| fail(format!("bad dimensions {h}×{w}")))?;
    let raw = take(n * 4, "pixels")?;
    let data: Vec<f32> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if pos != bytes.len() {
        return Err(fail(format!("{} trailing bytes", bytes.len() - pos)));
    }
    let pixels = Tensor::new(&[1, h, w], data)?;
    SliceImage::new(pixels, patient, index, kind).map_err(|e| fail(e.to_string()))
}

pub fn save_slice(s: &SliceImage, path: &Path) -> Result<()> {
    fs::write(path, slice_to_bytes(s)).map_err(|e| Error::io(path, e))
}

pub fn load_slice(path: &Path) -> Result<SliceImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    slice_from_bytes(&bytes, path)
}

/// 16-bit big-endian binary PGM; sample = trunc(pixel·257), so 255 → 65535.
pub fn pgm_bytes(s: &SliceImage) -> Vec<u8> {
    let mut buf = format!("P5\n{} {}\n65535\n", s.width(), s.height()).into_bytes();
    for &v in s.pixels().data() {
        let q = (v * PGM_SCALE).trunc().clamp(0.0, 65535.0) as u16;
        buf.extend_from_slice(&q.to_be_bytes());
    }
    buf
}

pub fn export_pgm(s: &SliceImage, path: &Path) -> Result<()> {
    fs::write(path, pgm_bytes(s)).map_err(|e| Error::io(path, e))
}
