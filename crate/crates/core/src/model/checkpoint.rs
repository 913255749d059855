//! Binary checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! "CTLF" | version u32 | config_len u32 | config JSON (UTF-8)
//! step u64 | seed u64 | record_count u32
//! record_count × { name_len u32 | name | rank u32 | dims u32×rank | f32×numel | crc32 u32 }
//! ```
//!
//! The crc of each record covers its name, rank, dims and data bytes.
//! Optimizer moments are stored as extra records named `adam.m/<param>` and
//! `adam.v/<param>` after the parameters.

use std::fs;
use std::path::{Path, PathBuf};

use ctl_tensor::Tensor;

use super::config::ModelConfig;
use super::params::Parameters;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CTLF";
pub const CHECKPOINT_VERSION: u32 = 1;

const M_PREFIX: &str = "adam.m/";
const V_PREFIX: &str = "adam.v/";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: Parameters,
    pub step: u64,
    pub seed: u64,
    /// Adam first and second moments, same layout as `params`.
    pub moments: Option<(Parameters, Parameters)>,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_record(buf: &mut Vec<u8>, name: &str, t: &Tensor) {
    let start = buf.len();
    put_u32(buf, name.len() as u32);
    buf.extend_from_slice(name.as_bytes());
    put_u32(buf, t.rank() as u32);
    for &d in t.shape() {
        put_u32(buf, d as u32);
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&buf[start..]);
    put_u32(buf, crc);
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let config = serde_json::to_vec(&self.config)
            .map_err(|e| Error::Contract(format!("config serialization: {e}")))?;
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut buf, CHECKPOINT_VERSION);
        put_u32(&mut buf, config.len() as u32);
        buf.extend_from_slice(&config);
        buf.extend_from_slice(&self.step.to_le_bytes());
        buf.extend_from_slice(&self.seed.to_le_bytes());
        let extra = if self.moments.is_some() { 3 } else { 1 };
        put_u32(&mut buf, (self.params.len() * extra) as u32);
        for (name, t) in self.params.iter() {
            put_record(&mut buf, name, t);
        }
        if let Some((m, v)) = &self.moments {
            for (prefix, set) in [(M_PREFIX, m), (V_PREFIX, v)] {
                for (name, t) in set.iter() {
                    put_record(&mut buf, &format!("{prefix}{name}"), t);
                }
            }
        }
        Ok(buf)
    }

    /// Parse a checkpoint; `file` is used in error messages only.
    pub fn from_bytes(bytes: &[u8], file: &Path) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            file: file.to_path_buf(),
        };
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(r.fail("bad magic (not a CTLF checkpoint)"));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                what: "checkpoint",
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let len = r.u32("config length")? as usize;
        let config: ModelConfig = serde_json::from_slice(r.take(len, "config")?)
            .map_err(|e| r.fail(&format!("config JSON: {e}")))?;
        config
            .validate()
            .map_err(|e| r.fail(&format!("stored config invalid: {e}")))?;
        let step = r.u64("step")?;
        let seed = r.u64("seed")?;
        let count = r.u32("record count")? as usize;

        let mut params = Parameters::new();
        let mut m = Parameters::new();
        let mut v = Parameters::new();
        for i in 0..count {
            let (name, t) = r.record(i)?;
            let (set, key) = if let Some(k) = name.strip_prefix(M_PREFIX) {
                (&mut m, k.to_string())
            } else if let Some(k) = name.strip_prefix(V_PREFIX) {
                (&mut v, k.to_string())
            } else {
                (&mut params, name.clone())
            };
            set.insert(key, t)
                .map_err(|_| r.fail(&format!("duplicate record {name}")))?;
        }
        if r.pos != bytes.len() {
            return Err(r.fail(&format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        super::check_layout(&config, &params).map_err(|e| r.fail(&e.to_string()))?;
        let moments = match (m.is_empty(), v.is_empty()) {
            (true, true) => None,
            _ => {
                for (kind, set) in [("first", &m), ("second", &v)] {
                    super::check_layout(&config, set)
                        .map_err(|e| r.fail(&format!("{kind} moments: {e}")))?;
                }
                Some((m, v))
            }
        };
        Ok(Checkpoint {
            config,
            params,
            step,
            seed,
            moments,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    file: PathBuf,
}

impl<'a> Reader<'a> {
    fn fail(&self, detail: &str) -> Error {
        Error::Integrity {
            file: self.file.clone(),
            detail: detail.to_string(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.fail(&format!("truncated while reading {what}"))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn record(&mut self, index: usize) -> Result<(String, Tensor)> {
        let start = self.pos;
        let label = format!("record {index}");
        let len = self.u32(&label)? as usize;
        let name = std::str::from_utf8(self.take(len, &label)?)
            .map_err(|_| self.fail(&format!("{label}: name is not UTF-8")))?
            .to_string();
        let rank = self.u32(&name)? as usize;
        if rank == 0 || rank > 8 {
            return Err(self.fail(&format!("record {name}: rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32(&name)? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n > 0)
            .ok_or_else(|| self.fail(&format!("record {name}: bad shape {shape:?}")))?;
        let raw = self.take(numel * 4, &name)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let body_end = self.pos;
        let stored = self.u32(&name)?;
        if crc32fast::hash(&self.bytes[start..body_end]) != stored {
            return Err(self.fail(&format!("record {name}: checksum mismatch")));
        }
        let t = Tensor::new(&shape, data).map_err(|e| self.fail(&format!("record {name}: {e}")))?;
        Ok((name, t))
    }
}

/// Write atomically: a sibling temporary file is renamed over `path`.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}

/// Load and reject a stored tile size that conflicts with `tile_override`.
pub fn load_checkpoint_with(path: &Path, tile_override: Option<usize>) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    if let Some(t) = tile_override {
        if t != ckpt.config.tile_size {
            return crate::error::contract(format!(
                "tile size {t} conflicts with checkpoint tile size {} in {}",
                ckpt.config.tile_size,
                path.display()
            ));
        }
    }
    Ok(ckpt)
}
