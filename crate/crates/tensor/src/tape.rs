use std::sync::Arc;

use crate::error::{shape_err, Result, TensorError};
use crate::geometry::PatchGeometry;
use crate::kernels::{self, gemm_into};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Offset(Var),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Permute {
        a: Var,
        map: Vec<usize>,
    },
    Reshape(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Ln(Var),
    Softmax {
        a: Var,
        axis: usize,
    },
    MaskedSoftmax {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Unfold {
        a: Var,
        geom: PatchGeometry,
    },
    Fold {
        a: Var,
        geom: PatchGeometry,
    },
    ReduceSum {
        a: Var,
        axis: usize,
    },
    SumAll(Var),
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Define-by-run computation record. Node indices are assigned in creation
/// order, so reverse index order is a valid reverse topological order.
pub struct Tape<F: Real = f32> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable input: gradients are collected for it.
    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_raw(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(value, op, rg)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(F, F) -> F,
        op: impl FnOnce(Var, Var) -> Op<F>,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out = if ta.shape() == tb.shape() {
            let data = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::new(ta.shape(), data)?
        } else {
            let shape = kernels::broadcast_shape(ta.shape(), tb.shape())?;
            let oa = kernels::broadcast_offsets(ta.shape(), &shape);
            let ob = kernels::broadcast_offsets(tb.shape(), &shape);
            let (da, db) = (ta.data(), tb.data());
            let data = oa.iter().zip(&ob).map(|(&i, &j)| f(da[i], db[j])).collect();
            Tensor::new(&shape, data)?
        };
        Ok(self.push(out, op(a, b), &[a, b]))
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: F) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::Offset(a), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -F::one())
    }

    /// `[m×k] · [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// 2-D product with either operand optionally transposed in place.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return shape_err(format!(
                "matmul needs rank-2 operands, got {sa:?} and {sb:?}"
            ));
        }
        let v = self.bmm_impl(a, b, ta, tb, 1, &sa, &sb)?;
        Ok(v)
    }

    /// Batched product over a shared leading axis: `[B×m×k] · [B×k×n]`.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return shape_err(format!(
                "bmm needs matching [B×·×·] operands, got {sa:?} and {sb:?}"
            ));
        }
        self.bmm_impl(a, b, ta, tb, sa[0], &sa[1..], &sb[1..])
    }

    #[allow(clippy::too_many_arguments)]
    fn bmm_impl(
        &mut self,
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        batch: usize,
        sa: &[usize],
        sb: &[usize],
    ) -> Result<Var> {
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return shape_err(format!(
                "matmul inner dimensions disagree: {sa:?}{} × {sb:?}{}",
                if ta { "ᵀ" } else { "" },
                if tb { "ᵀ" } else { "" }
            ));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![F::zero(); batch * m * n];
        for bi in 0..batch {
            gemm_into(
                m,
                k,
                n,
                &da[bi * m * k..(bi + 1) * m * k],
                ta,
                &db[bi * k * n..(bi + 1) * k * n],
                tb,
                F::zero(),
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
        let shape = if batch == 1 && self.shape(a).len() == 2 {
            vec![m, n]
        } else {
            vec![batch, m, n]
        };
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(
            t,
            Op::MatMul {
                a,
                b,
                ta,
                tb,
                batch,
                m,
                k,
                n,
            },
            &[a, b],
        ))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let src = self.value(a);
        let shape = kernels::permute_shape(src.shape(), axes)?;
        let map = kernels::permute_map(src.shape(), axes);
        let data = map.iter().map(|&i| src.data()[i]).collect();
        let t = Tensor::new(&shape, data)?;
        Ok(self.push(t, Op::Permute { a, map }, &[a]))
    }

    /// Swap the two axes of a matrix.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).len() != 2 {
            return shape_err(format!("transpose needs rank 2, got {:?}", self.shape(a)));
        }
        self.permute(a, &[1, 0])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = match parts.first() {
            Some(&p) => self.shape(p).to_vec(),
            None => return shape_err("concat of zero tensors"),
        };
        if axis >= first.len() {
            return shape_err(format!("concat axis {axis} out of range for {first:?}"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let same = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !same {
                return shape_err(format!("concat shape {s:?} incompatible with {first:?}"));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = kernels::axis_split(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let t = Tensor::new(&shape, data)?;
        Ok(self.push(
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// GELU, tanh approximation: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(kernels::gelu);
        self.push(out, Op::Gelu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.tanh());
        self.push(out, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(kernels::sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    /// Natural logarithm; inputs must be positive.
    pub fn ln(&mut self, a: Var) -> Result<Var> {
        if self
            .value(a)
            .data()
            .iter()
            .any(|&x| !(x > F::zero()) || !x.is_finite())
        {
            return Err(TensorError::NonFinite("ln"));
        }
        let out = self.value(a).map(|x| x.ln());
        Ok(self.push(out, Op::Ln(a), &[a]))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        if axis >= x.rank() {
            return shape_err(format!(
                "softmax axis {axis} out of range for {:?}",
                x.shape()
            ));
        }
        if !x.all_finite() {
            return Err(TensorError::NonFinite("softmax"));
        }
        let (outer, len, inner) = kernels::axis_split(x.shape(), axis);
        let mut out = vec![F::zero(); x.numel()];
        for o in 0..outer {
            for i in 0..inner {
                kernels::softmax_lane(x.data(), &mut out, o * len * inner + i, len, inner, None);
            }
        }
        let t = Tensor::new(x.shape(), out)?;
        Ok(self.push(t, Op::Softmax { a, axis }, &[a]))
    }

    /// Softmax over the last axis where `mask` (shaped like the trailing two
    /// axes, row-major) selects the admissible entries. Excluded entries get
    /// weight exactly zero.
    pub fn masked_softmax(&mut self, a: Var, mask: &Arc<Vec<bool>>) -> Result<Var> {
        let x = self.value(a);
        let r = x.rank();
        if r < 2 {
            return shape_err(format!(
                "masked_softmax needs rank ≥ 2, got {:?}",
                x.shape()
            ));
        }
        let (rows, len) = (x.shape()[r - 2], x.shape()[r - 1]);
        if mask.len() != rows * len {
            return shape_err(format!(
                "mask of {} entries for trailing {rows}×{len}",
                mask.len()
            ));
        }
        if let Some(row) = mask.chunks(len).position(|row| !row.iter().any(|&m| m)) {
            return Err(TensorError::Contract(format!(
                "mask row {row} admits no entries"
            )));
        }
        if !x.all_finite() {
            return Err(TensorError::NonFinite("masked_softmax"));
        }
        let mut out = vec![F::zero(); x.numel()];
        let lanes = x.numel() / len;
        for l in 0..lanes {
            let row = l % rows;
            let m = &mask[row * len..(row + 1) * len];
            kernels::softmax_lane(x.data(), &mut out, l * len, len, 1, Some(m));
        }
        let t = Tensor::new(x.shape(), out)?;
        Ok(self.push(t, Op::MaskedSoftmax { a }, &[a]))
    }

    /// Normalize each row over the last axis to zero mean and unit (biased)
    /// variance, then apply `gain` and `bias` of shape `[D]`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Result<Var> {
        let xv = self.value(x);
        let d = *xv.shape().last().unwrap();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return shape_err(format!(
                "layernorm gain {:?} / bias {:?} do not match last axis {d}",
                self.shape(gain),
                self.shape(bias)
            ));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = xv.numel() / d;
        let mut out = vec![F::zero(); xv.numel()];
        let mut xhat = vec![F::zero(); xv.numel()];
        let mut rstd = vec![F::zero(); rows];
        let dn = F::of(d as f64);
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<F>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / dn;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(xv.shape(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Extract sliding patches of a `[C×H×W]` tensor as rows of `[N × C·k·k]`.
    pub fn unfold(&mut self, a: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 3 {
            return shape_err(format!("unfold needs [C×H×W], got {s:?}"));
        }
        let geom = PatchGeometry::new(s[0], s[1], s[2], kernel, stride, pad)?;
        self.unfold_geom(a, geom)
    }

    pub fn unfold_geom(&mut self, a: Var, geom: PatchGeometry) -> Result<Var> {
        let s = self.shape(a);
        if s != [geom.channels, geom.height, geom.width] {
            return shape_err(format!(
                "unfold input {s:?} does not match geometry {geom:?}"
            ));
        }
        let data = kernels::unfold(self.value(a).data(), &geom);
        let t = Tensor::new(&[geom.num_patches(), geom.patch_len()], data)?;
        Ok(self.push(t, Op::Unfold { a, geom }, &[a]))
    }

    /// Overlap-add patch rows back to `[C×H×W]`; inverse layout of `unfold`.
    pub fn fold(&mut self, a: Var, geom: PatchGeometry) -> Result<Var> {
        let s = self.shape(a);
        if s != [geom.num_patches(), geom.patch_len()] {
            return shape_err(format!(
                "fold expects [{}×{}] patches for {geom:?}, got {s:?}",
                geom.num_patches(),
                geom.patch_len()
            ));
        }
        let mut data = vec![F::zero(); geom.image_len()];
        kernels::fold_into(self.value(a).data(), &geom, &mut data);
        let t = Tensor::new(&[geom.channels, geom.height, geom.width], data)?;
        Ok(self.push(t, Op::Fold { a, geom }, &[a]))
    }

    /// Zero-padded cross-correlation of `[C_in×H×W]` with `[C_out×C_in×k×k]`
    /// kernels, lowered to unfold + matrix product.
    pub fn conv2d(&mut self, input: Var, kernels: Var, stride: usize, pad: usize) -> Result<Var> {
        let (si, sk) = (self.shape(input).to_vec(), self.shape(kernels).to_vec());
        if si.len() != 3 || sk.len() != 4 || sk[2] != sk[3] || sk[1] != si[0] {
            return shape_err(format!(
                "conv2d input {si:?} incompatible with kernels {sk:?}"
            ));
        }
        let geom = PatchGeometry::new(si[0], si[1], si[2], sk[2], stride, pad)?;
        let cols = self.unfold_geom(input, geom)?;
        let w = self.reshape(kernels, &[sk[0], geom.patch_len()])?;
        let y = self.matmul_t(w, cols, false, true)?;
        self.reshape(y, &[sk[0], geom.out_h(), geom.out_w()])
    }

    /// Sum over `axis`, keeping it as a size-1 dimension.
    pub fn reduce_sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        if axis >= x.rank() {
            return shape_err(format!(
                "reduce axis {axis} out of range for {:?}",
                x.shape()
            ));
        }
        let (outer, len, inner) = kernels::axis_split(x.shape(), axis);
        let mut out = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    let v = x.data()[(o * len + j) * inner + i];
                    out[o * inner + i] = out[o * inner + i] + v;
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = 1;
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::ReduceSum { a, axis }, &[a]))
    }

    pub fn reduce_mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let len = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| TensorError::Shape(format!("reduce axis {axis} out of range")))?;
        let s = self.reduce_sum(a, axis)?;
        Ok(self.scale(s, F::one() / F::of(len as f64)))
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<F>();
        self.push(Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let s = self.sum(a);
        self.scale(s, F::one() / F::of(n as f64))
    }

    /// Mean squared difference between two same-shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!(
                "mse of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Reverse sweep from a one-element `loss`. Consumes the tape and returns
    /// the gradient of every trainable leaf (zeros if unreachable).
    pub fn backward(self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<F>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backward_node(&nodes, i, &g, &mut grads);
        }

        let out = nodes
            .iter()
            .zip(grads)
            .map(|(n, g)| match (&n.op, n.requires_grad) {
                (Op::Leaf, true) => Some(match g {
                    Some(g) => Tensor::new(n.value.shape(), g).expect("gradient shape"),
                    None => Tensor::zeros(n.value.shape()),
                }),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads: out })
    }
}

/// Gradient buffer for `v`, allocated lazily; `None` when `v` needs no grad.
fn slot<'a, F: Real>(
    nodes: &[Node<F>],
    grads: &'a mut [Option<Vec<F>>],
    v: Var,
) -> Option<&'a mut Vec<F>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); node.value.numel()]))
}

fn reduce_into<F: Real>(
    dst: &mut [F],
    src_shape: &[usize],
    out_shape: &[usize],
    g: &[F],
    scale: impl Fn(usize) -> F,
) {
    if src_shape == out_shape {
        for (k, (d, &gv)) in dst.iter_mut().zip(g).enumerate() {
            *d = *d + gv * scale(k);
        }
    } else {
        let offs = kernels::broadcast_offsets(src_shape, out_shape);
        for (k, (&o, &gv)) in offs.iter().zip(g).enumerate() {
            dst[o] = dst[o] + gv * scale(k);
        }
    }
}

fn broadcast_value<F: Real>(t: &Tensor<F>, out_shape: &[usize]) -> Vec<F> {
    if t.shape() == out_shape {
        t.data().to_vec()
    } else {
        kernels::broadcast_offsets(t.shape(), out_shape)
            .into_iter()
            .map(|o| t.data()[o])
            .collect()
    }
}

fn backward_node<F: Real>(nodes: &[Node<F>], i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
    let node = &nodes[i];
    let out_shape = node.value.shape();
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) {
                -F::one()
            } else {
                F::one()
            };
            if let Some(d) = slot(nodes, grads, *a) {
                reduce_into(d, val(*a).shape(), out_shape, g, |_| F::one());
            }
            if let Some(d) = slot(nodes, grads, *b) {
                reduce_into(d, val(*b).shape(), out_shape, g, |_| sign);
            }
        }
        Op::Mul(a, b) => {
            if nodes[a.0].requires_grad {
                let bv = broadcast_value(val(*b), out_shape);
                let d = slot(nodes, grads, *a).unwrap();
                reduce_into(d, val(*a).shape(), out_shape, g, |k| bv[k]);
            }
            if nodes[b.0].requires_grad {
                let av = broadcast_value(val(*a), out_shape);
                let d = slot(nodes, grads, *b).unwrap();
                reduce_into(d, val(*b).shape(), out_shape, g, |k| av[k]);
            }
        }
        Op::Scale(a, c) => {
            if let Some(d) = slot(nodes, grads, *a) {
                for (d, &gv) in d.iter_mut().zip(g) {
                    *d = *d + gv * *c;
                }
            }
        }
        Op::Offset(a) | Op::Reshape(a) => {
            if let Some(d) = slot(nodes, grads, *a) {
                for (d, &gv) in d.iter_mut().zip(g) {
                    *d = *d + gv;
                }
            }
        }
        &Op::MatMul {
            a,
            b,
            ta,
            tb,
            batch,
            m,
            k,
            n,
        } => {
            let (da, db) = (val(a).data(), val(b).data());
            if let Some(ga) = slot(nodes, grads, a) {
                for bi in 0..batch {
                    let gc = &g[bi * m * n..(bi + 1) * m * n];
                    let bs = &db[bi * k * n..(bi + 1) * k * n];
                    let out = &mut ga[bi * m * k..(bi + 1) * m * k];
                    if ta {
                        gemm_into(k, n, m, bs, tb, gc, true, F::one(), out);
                    } else {
                        gemm_into(m, n, k, gc, false, bs, !tb, F::one(), out);
                    }
                }
            }
            if let Some(gb) = slot(nodes, grads, b) {
                for bi in 0..batch {
                    let gc = &g[bi * m * n..(bi + 1) * m * n];
                    let as_ = &da[bi * m * k..(bi + 1) * m * k];
                    let out = &mut gb[bi * k * n..(bi + 1) * k * n];
                    if tb {
                        gemm_into(n, m, k, gc, true, as_, ta, F::one(), out);
                    } else {
                        gemm_into(k, m, n, as_, !ta, gc, false, F::one(), out);
                    }
                }
            }
        }
        Op::Permute { a, map } => {
            if let Some(d) = slot(nodes, grads, *a) {
                for (&src, &gv) in map.iter().zip(g) {
                    d[src] = d[src] + gv;
                }
            }
        }
        Op::Concat { parts, axis } => {
            let (outer, _, inner) = kernels::axis_split(out_shape, *axis);
            let total = out_shape[*axis] * inner;
            let mut start = 0;
            for &p in parts {
                let chunk = val(p).shape()[*axis] * inner;
                if let Some(d) = slot(nodes, grads, p) {
                    for o in 0..outer {
                        let src = &g[o * total + start..o * total + start + chunk];
                        for (d, &gv) in d[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                            *d = *d + gv;
                        }
                    }
                }
                start += chunk;
            }
        }
        Op::Gelu(a) => {
            let x = val(*a).data();
            if let Some(d) = slot(nodes, grads, *a) {
                for ((d, &gv), &xv) in d.iter_mut().zip(g).zip(x) {
                    *d = *d + gv * kernels::gelu_grad(xv);
                }
            }
        }
        Op::Tanh(a) => {
            let y = node.value.data();
            if let Some(d) = slot(nodes, grads, *a) {
                for ((d, &gv), &yv) in d.iter_mut().zip(g).zip(y) {
                    *d = *d + gv * (F::one() - yv * yv);
                }
            }
        }
        Op::Sigmoid(a) => {
            let y = node.value.data();
            if let Some(d) = slot(nodes, grads, *a) {
                for ((d, &gv), &yv) in d.iter_mut().zip(g).zip(y) {
                    *d = *d + gv * yv * (F::one() - yv);
                }
            }
        }
        Op::Ln(a) => {
            let x = val(*a).data();
            if let Some(d) = slot(nodes, grads, *a) {
                for ((d, &gv), &xv) in d.iter_mut().zip(g).zip(x) {
                    *d = *d + gv / xv;
                }
            }
        }
        Op::Softmax { a, axis } => {
            let y = node.value.data();
            let (outer, len, inner) = kernels::axis_split(out_shape, *axis);
            if let Some(d) = slot(nodes, grads, *a) {
                for o in 0..outer {
                    for ii in 0..inner {
                        let base = o * len * inner + ii;
                        let dot: F = (0..len)
                            .map(|j| g[base + j * inner] * y[base + j * inner])
                            .sum();
                        for j in 0..len {
                            let p = base + j * inner;
                            d[p] = d[p] + y[p] * (g[p] - dot);
                        }
                    }
                }
            }
        }
        Op::MaskedSoftmax { a } => {
            let y = node.value.data();
            let len = *out_shape.last().unwrap();
            if let Some(d) = slot(nodes, grads, *a) {
                for ((dr, gr), yr) in d.chunks_mut(len).zip(g.chunks(len)).zip(y.chunks(len)) {
                    let dot: F = gr.iter().zip(yr).map(|(&gv, &yv)| gv * yv).sum();
                    for j in 0..len {
                        dr[j] = dr[j] + yr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let d = *out_shape.last().unwrap();
            let gv = val(*gain).data();
            if let Some(dg) = slot(nodes, grads, *gain) {
                for (r, gr) in g.chunks(d).enumerate() {
                    for j in 0..d {
                        dg[j] = dg[j] + gr[j] * xhat[r * d + j];
                    }
                }
            }
            if let Some(db) = slot(nodes, grads, *bias) {
                for gr in g.chunks(d) {
                    for j in 0..d {
                        db[j] = db[j] + gr[j];
                    }
                }
            }
            if let Some(dx) = slot(nodes, grads, *x) {
                let dn = F::of(d as f64);
                for (r, gr) in g.chunks(d).enumerate() {
                    let xh = &xhat[r * d..(r + 1) * d];
                    let mut mean_dy = F::zero();
                    let mut mean_dyx = F::zero();
                    for j in 0..d {
                        let dy = gr[j] * gv[j];
                        mean_dy = mean_dy + dy;
                        mean_dyx = mean_dyx + dy * xh[j];
                    }
                    mean_dy = mean_dy / dn;
                    mean_dyx = mean_dyx / dn;
                    for j in 0..d {
                        let dy = gr[j] * gv[j];
                        let p = r * d + j;
                        dx[p] = dx[p] + rstd[r] * (dy - mean_dy - xh[j] * mean_dyx);
                    }
                }
            }
        }
        Op::Unfold { a, geom } => {
            if let Some(d) = slot(nodes, grads, *a) {
                kernels::fold_into(g, geom, d);
            }
        }
        Op::Fold { a, geom } => {
            if let Some(d) = slot(nodes, grads, *a) {
                geom.for_each_tap(|p, i| d[p] = d[p] + g[i]);
            }
        }
        Op::ReduceSum { a, axis } => {
            let (outer, len, inner) = kernels::axis_split(val(*a).shape(), *axis);
            if let Some(d) = slot(nodes, grads, *a) {
                for o in 0..outer {
                    for j in 0..len {
                        for ii in 0..inner {
                            let p = (o * len + j) * inner + ii;
                            d[p] = d[p] + g[o * inner + ii];
                        }
                    }
                }
            }
        }
        Op::SumAll(a) => {
            if let Some(d) = slot(nodes, grads, *a) {
                for v in d.iter_mut() {
                    *v = *v + g[0];
                }
            }
        }
    }
}

/// Gradients of the trainable leaves of a consumed tape.
pub struct Gradients<F: Real = f32> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient of a trainable leaf; `None` for constants and interior nodes.
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
