//! Slice-level kernels shared by forward and backward passes.

use crate::error::{shape_err, Result};
use crate::geometry::PatchGeometry;
use crate::real::Real;

/// `out = beta·out + X·Y` with `X` logically `[m×k]` and `Y` logically `[k×n]`.
/// A transposed operand is stored row-major in its untransposed layout.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_into<F: Real>(
    m: usize,
    k: usize,
    n: usize,
    x: &[F],
    trans_x: bool,
    y: &[F],
    trans_y: bool,
    beta: F,
    out: &mut [F],
) {
    assert!(x.len() >= m * k && y.len() >= k * n && out.len() >= m * n);
    let xs = if trans_x {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let ys = if trans_y {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    F::gemm(m, k, n, x, xs, y, ys, beta, out);
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let pad = |s: &[usize]| {
        let mut v = vec![1; rank - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(a), pad(b));
    pa.iter()
        .zip(&pb)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => shape_err(format!("cannot broadcast {a:?} with {b:?}")),
        })
        .collect()
}

/// For each element of `out_shape`, the linear offset of the broadcast source
/// element in a tensor of shape `src`.
pub(crate) fn broadcast_offsets(src: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let mut padded = vec![1; rank - src.len()];
    padded.extend_from_slice(src);
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..rank).rev() {
        strides[i] = if padded[i] == 1 { 0 } else { acc };
        acc *= padded[i];
    }
    strided_walk(out_shape, &strides)
}

pub(crate) fn permute_shape(shape: &[usize], axes: &[usize]) -> Result<Vec<usize>> {
    let mut seen = vec![false; shape.len()];
    if axes.len() != shape.len() {
        return shape_err(format!("permutation {axes:?} for shape {shape:?}"));
    }
    for &a in axes {
        if a >= shape.len() || seen[a] {
            return shape_err(format!("invalid permutation {axes:?}"));
        }
        seen[a] = true;
    }
    Ok(axes.iter().map(|&a| shape[a]).collect())
}

/// Gather `src` (shape `shape`) into permuted order: `out[i] = src[map[i]]`.
pub(crate) fn permute_map(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let rank = shape.len();
    let mut src_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        src_strides[i] = src_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
    strided_walk(&out_shape, &strides)
}

fn strided_walk(out_shape: &[usize], strides: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let numel: usize = out_shape.iter().product();
    let mut offsets = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..numel {
        offsets.push(off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    offsets
}

/// Split `shape` around `axis` into `(outer, len, inner)`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numerically stable softmax over strided lanes. Masked entries (`false`)
/// get exactly zero weight; an all-true mask takes the same arithmetic path
/// as no mask.
pub(crate) fn softmax_lane<F: Real>(
    x: &[F],
    out: &mut [F],
    base: usize,
    len: usize,
    step: usize,
    mask: Option<&[bool]>,
) {
    let keep = |j: usize| mask.is_none_or(|m| m[j]);
    let mut max = F::neg_infinity();
    for j in 0..len {
        if keep(j) {
            max = max.max(x[base + j * step]);
        }
    }
    let mut sum = F::zero();
    for j in 0..len {
        let e = if keep(j) {
            (x[base + j * step] - max).exp()
        } else {
            F::zero()
        };
        out[base + j * step] = e;
        sum = sum + e;
    }
    for j in 0..len {
        let o = &mut out[base + j * step];
        *o = *o / sum;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub(crate) fn gelu<F: Real>(x: F) -> F {
    let c = F::of(GELU_C);
    let a = F::of(GELU_A);
    let half = F::of(0.5);
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<F: Real>(x: F) -> F {
    let c = F::of(GELU_C);
    let a = F::of(GELU_A);
    let half = F::of(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + F::of(3.0) * a * x * x)
}

pub(crate) fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

pub(crate) fn unfold<F: Real>(image: &[F], g: &PatchGeometry) -> Vec<F> {
    let mut out = vec![F::zero(); g.num_patches() * g.patch_len()];
    g.for_each_tap(|p, i| out[p] = image[i]);
    out
}

/// Overlap-add of patch rows back into image space (accumulates into `out`).
pub(crate) fn fold_into<F: Real>(patches: &[F], g: &PatchGeometry, out: &mut [F]) {
    g.for_each_tap(|p, i| out[i] = out[i] + patches[p]);
}
