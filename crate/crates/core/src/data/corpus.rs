//! Corpus layout: `<dir>/<patient_id>/<index:03>.ctsl` holds the clean
//! slice and `<index:03>.noisy.ctsl` its degraded counterpart.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::container::{load_slice, save_slice};
use super::noise::{inject_noise, NoiseSpec};
use super::phantom::{generate_phantom_as, PhantomSpec};
use super::split::PatientKeyed;
use super::{SliceImage, SliceKind};
use crate::error::{contract, Error, Result};
use crate::rng::derive_seed;

const PATIENT_IDS: [&str; 10] = [
    "L067", "L096", "L109", "L143", "L192", "L286", "L291", "L310", "L333", "L506",
];

/// Synthetic patient identifier for index `i`.
pub fn patient_id(i: usize) -> String {
    match PATIENT_IDS.get(i) {
        Some(p) => format!("{p}-syn"),
        None => format!("P{i:03}-syn"),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub patients: usize,
    pub slices: usize,
    pub phantom: PhantomSpec,
    pub noise: NoiseSpec,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            patients: 10,
            slices: 20,
            phantom: PhantomSpec::default(),
            noise: NoiseSpec::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlicePair {
    pub clean: SliceImage,
    pub noisy: SliceImage,
}

impl PatientKeyed for SlicePair {
    fn patient(&self) -> &str {
        &self.clean.patient_id
    }
}

const PHANTOM_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;

/// Generate every pair in memory; seeds split from `spec.seed` per slice.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<SlicePair>> {
    if spec.patients == 0 || spec.slices == 0 {
        return contract("corpus needs at least one patient and one slice");
    }
    let jobs: Vec<(usize, usize)> = (0..spec.patients)
        .flat_map(|p| (0..spec.slices).map(move |s| (p, s)))
        .collect();
    jobs.par_iter()
        .map(|&(p, s)| {
            let key = (p * spec.slices + s) as u64;
            let phantom = PhantomSpec {
                seed: derive_seed(spec.seed, PHANTOM_STREAM, key),
                ..spec.phantom.clone()
            };
            let noise = NoiseSpec {
                seed: derive_seed(spec.seed, NOISE_STREAM, key),
                ..spec.noise.clone()
            };
            let clean = generate_phantom_as(&phantom, &patient_id(p), s as u32)?;
            let noisy = inject_noise(&clean, &noise)?;
            Ok(SlicePair { clean, noisy })
        })
        .collect()
}

fn slice_paths(dir: &Path, s: &SliceImage) -> (PathBuf, PathBuf) {
    let d = dir.join(&s.patient_id);
    (
        d.join(format!("{:03}.ctsl", s.slice_index)),
        d.join(format!("{:03}.noisy.ctsl", s.slice_index)),
    )
}

pub fn write_pairs(dir: &Path, pairs: &[SlicePair]) -> Result<()> {
    for pair in pairs {
        let (c, n) = slice_paths(dir, &pair.clean);
        let parent = c.parent().expect("slice path has a parent");
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        save_slice(&pair.clean, &c)?;
        save_slice(&pair.noisy, &n)?;
    }
    Ok(())
}

pub fn write_corpus(dir: &Path, spec: &CorpusSpec) -> Result<Vec<SlicePair>> {
    let pairs = generate_corpus(spec)?;
    write_pairs(dir, &pairs)?;
    Ok(pairs)
}

/// Read every pair under `dir`, sorted by patient then slice index.
pub fn read_corpus(dir: &Path) -> Result<Vec<SlicePair>> {
    let mut patients: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    patients.sort();
    let mut pairs = Vec::new();
    for pdir in patients {
        let mut files: Vec<PathBuf> = fs::read_dir(&pdir)
            .map_err(|e| Error::io(&pdir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.ends_with(".ctsl") && !n.ends_with(".noisy.ctsl"))
            })
            .collect();
        files.sort();
        for clean_path in files {
            let clean = load_slice(&clean_path)?;
            let noisy_path = clean_path.with_extension("noisy.ctsl");
            let noisy = load_slice(&noisy_path)?;
            let integrity = |detail: String| Error::Integrity {
                file: noisy_path.clone(),
                detail,
            };
            if clean.kind != SliceKind::Clean || noisy.kind != SliceKind::Noisy {
                return Err(integrity(format!(
                    "expected clean/noisy pair, found {}/{}",
                    clean.kind, noisy.kind
                )));
            }
            if clean.patient_id != noisy.patient_id
                || clean.slice_index != noisy.slice_index
                || clean.pixels().shape() != noisy.pixels().shape()
            {
                return Err(integrity(format!(
                    "does not pair with {}",
                    clean_path.display()
                )));
            }
            pairs.push(SlicePair { clean, noisy });
        }
    }
    if pairs.is_empty() {
        return contract(format!("no slices found under {}", dir.display()));
    }
    Ok(pairs)
}
