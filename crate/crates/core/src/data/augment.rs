use ctl_tensor::Tensor;
use rand::Rng;

use super::SliceImage;
use crate::error::{contract, Result};

/// Counter-clockwise quarter turns followed by an optional horizontal flip.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Transform {
    pub quarter_turns: u8,
    pub flip: bool,
}

impl Transform {
    pub const ALL: [Transform; 8] = {
        let mut all = [Transform {
            quarter_turns: 0,
            flip: false,
        }; 8];
        let mut i = 0;
        while i < 8 {
            all[i] = Transform {
                quarter_turns: (i % 4) as u8,
                flip: i >= 4,
            };
            i += 1;
        }
        all
    };

    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        Self::ALL[rng.random_range(0..8)]
    }

    pub fn is_identity(self) -> bool {
        self.quarter_turns.is_multiple_of(4) && !self.flip
    }

    /// Source index for each output pixel of an `h×w` plane.
    fn source(self, h: usize, w: usize) -> (usize, usize, Vec<usize>) {
        let turns = self.quarter_turns % 4;
        let (oh, ow) = if turns % 2 == 1 { (w, h) } else { (h, w) };
        let mut idx = Vec::with_capacity(h * w);
        for y in 0..oh {
            for x in 0..ow {
                let x = if self.flip { ow - 1 - x } else { x };
                let (sy, sx) = match turns {
                    0 => (y, x),
                    1 => (x, w - 1 - y),
                    2 => (h - 1 - y, w - 1 - x),
                    _ => (h - 1 - x, y),
                };
                idx.push(sy * w + sx);
            }
        }
        (oh, ow, idx)
    }

    /// Apply to a `[C×H×W]` tensor (every channel alike).
    pub fn apply(self, t: &Tensor) -> Result<Tensor> {
        let [c, h, w] = *t.shape() else {
            return contract(format!("transform needs [C×H×W], got {:?}", t.shape()));
        };
        if self.is_identity() {
            return Ok(t.clone());
        }
        let (oh, ow, idx) = self.source(h, w);
        let src = t.data();
        let mut data = Vec::with_capacity(t.numel());
        for ch in 0..c {
            let plane = &src[ch * h * w..(ch + 1) * h * w];
            data.extend(idx.iter().map(|&i| plane[i]));
        }
        Ok(Tensor::new(&[c, oh, ow], data)?)
    }
}

/// One transform, drawn from the 8 right-angle rotations and flips, applied
/// to both members of the pair.
pub fn augment(pair: (&SliceImage, &SliceImage), seed: u64) -> Result<(SliceImage, SliceImage)> {
    let mut rng = crate::rng::stream(seed, 0xA06, 0);
    augment_with(pair, Transform::sample(&mut rng))
}

pub fn augment_with(
    (clean, noisy): (&SliceImage, &SliceImage),
    tf: Transform,
) -> Result<(SliceImage, SliceImage)> {
    if clean.pixels().shape() != noisy.pixels().shape() {
        return Err(ctl_tensor::TensorError::Shape(format!(
            "pair members {:?} and {:?} differ",
            clean.pixels().shape(),
            noisy.pixels().shape()
        ))
        .into());
    }
    let map = |s: &SliceImage| {
        SliceImage::new(
            tf.apply(s.pixels())?,
            s.patient_id.clone(),
            s.slice_index,
            s.kind,
        )
    };
    Ok((map(clean)?, map(noisy)?))
}
