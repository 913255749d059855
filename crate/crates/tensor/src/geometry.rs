use crate::error::{shape_err, Result};
use crate::kernels;
use crate::real::Real;
use crate::tensor::Tensor;

/// Sliding-window layout shared by `unfold`, `fold` and convolution.
///
/// Patches are enumerated row-major over output positions. Within a patch the
/// column order is channel-major, then kernel row, then kernel column, which
/// matches a `[C_out × C_in × k × k]` kernel flattened per output channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PatchGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl PatchGeometry {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return shape_err(format!("empty input {channels}×{height}×{width}"));
        }
        if kernel == 0 || stride == 0 {
            return shape_err(format!(
                "kernel {kernel} and stride {stride} must be positive"
            ));
        }
        if kernel > height + 2 * pad || kernel > width + 2 * pad {
            return shape_err(format!(
                "kernel {kernel} larger than padded input {}×{} (pad {pad})",
                height + 2 * pad,
                width + 2 * pad
            ));
        }
        Ok(PatchGeometry {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
        })
    }

    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn num_patches(&self) -> usize {
        self.out_h() * self.out_w()
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Number of patches covering each input element: `fold` of all-ones
    /// patches, shaped `[C×H×W]`. Zero where no patch reaches.
    pub fn count_map<F: Real>(&self) -> Tensor<F> {
        let mut counts = vec![F::zero(); self.image_len()];
        let ones = vec![F::one(); self.num_patches() * self.patch_len()];
        kernels::fold_into(&ones, self, &mut counts);
        Tensor::new(&[self.channels, self.height, self.width], counts).expect("count map shape")
    }

    /// Calls `f(patch_offset, image_offset)` for every in-bounds tap.
    /// Padding taps are skipped.
    pub(crate) fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let (k, s, p) = (self.kernel, self.stride, self.pad as isize);
        let (h, w) = (self.height as isize, self.width as isize);
        let (oh, ow) = (self.out_h(), self.out_w());
        let plen = self.patch_len();
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (oy * ow + ox) * plen;
                for c in 0..self.channels {
                    let cbase = c * self.height * self.width;
                    for ki in 0..k {
                        let iy = (oy * s + ki) as isize - p;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        for kj in 0..k {
                            let ix = (ox * s + kj) as isize - p;
                            if ix < 0 || ix >= w {
                                continue;
                            }
                            f(
                                row + (c * k + ki) * k + kj,
                                cbase + iy as usize * self.width + ix as usize,
                            );
                        }
                    }
                }
            }
        }
    }

    /// Bounds of the input window for patch `(oy, ox)`, clipped to the image:
    /// `(y0, y1, x0, x1)` half-open.
    pub fn window(&self, oy: usize, ox: usize) -> (usize, usize, usize, usize) {
        let clip = |start: isize, len: usize| -> (usize, usize) {
            let lo = start.max(0) as usize;
            let hi = ((start + self.kernel as isize).max(0) as usize).min(len);
            (lo, hi)
        };
        let (y0, y1) = clip((oy * self.stride) as isize - self.pad as isize, self.height);
        let (x0, x1) = clip((ox * self.stride) as isize - self.pad as isize, self.width);
        (y0, y1, x0, x1)
    }
}
