//! Synthetic slice corpus: phantoms, simulated low-dose degradation,
//! right-angle augmentation, patient-wise splits and the slice container.

pub mod augment;
pub mod container;
pub mod corpus;
pub mod noise;
pub mod phantom;
pub mod split;

use std::fmt;

use ctl_tensor::Tensor;

use crate::error::{contract, Result};

pub use augment::{augment, Transform};
pub use container::{export_pgm, load_slice, save_slice};
pub use corpus::{read_corpus, write_corpus, CorpusSpec, SlicePair};
pub use noise::{inject_noise, streak_segments, NoiseSpec, Segment};
pub use phantom::{generate_phantom, PhantomSpec};
pub use split::{split_patients, Split};

pub const PIXEL_MAX: f32 = 255.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SliceKind {
    Clean,
    Noisy,
    Denoised,
}

impl SliceKind {
    pub fn code(self) -> u8 {
        match self {
            SliceKind::Clean => 0,
            SliceKind::Noisy => 1,
            SliceKind::Denoised => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(SliceKind::Clean),
            1 => Some(SliceKind::Noisy),
            2 => Some(SliceKind::Denoised),
            _ => None,
        }
    }
}

impl fmt::Display for SliceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SliceKind::Clean => "clean",
            SliceKind::Noisy => "noisy",
            SliceKind::Denoised => "denoised",
        })
    }
}

/// One slice in display units; every pixel finite and in [0, 255].
#[derive(Clone, Debug, PartialEq)]
pub struct SliceImage {
    pixels: Tensor,
    pub patient_id: String,
    pub slice_index: u32,
    pub kind: SliceKind,
}

impl SliceImage {
    pub fn new(
        pixels: Tensor,
        patient_id: impl Into<String>,
        slice_index: u32,
        kind: SliceKind,
    ) -> Result<Self> {
        if pixels.rank() != 3 || pixels.shape()[0] != 1 {
            return contract(format!("slice must be [1×H×W], got {:?}", pixels.shape()));
        }
        if let Some(v) = pixels
            .data()
            .iter()
            .find(|v| !(v.is_finite() && (0.0..=PIXEL_MAX).contains(*v)))
        {
            return contract(format!("slice pixel {v} outside [0, 255]"));
        }
        Ok(SliceImage {
            pixels,
            patient_id: patient_id.into(),
            slice_index,
            kind,
        })
    }

    /// Clamp an arbitrary estimate (e.g. a model output) into display range.
    pub fn clamped(
        pixels: &Tensor,
        patient_id: impl Into<String>,
        slice_index: u32,
        kind: SliceKind,
    ) -> Result<Self> {
        let p = pixels.map(|v| {
            if v.is_nan() {
                0.0
            } else {
                v.clamp(0.0, PIXEL_MAX)
            }
        });
        Self::new(p, patient_id, slice_index, kind)
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    /// `<patient>/<index>` label used in reports.
    pub fn label(&self) -> String {
        format!("{}/{:03}", self.patient_id, self.slice_index)
    }
}
