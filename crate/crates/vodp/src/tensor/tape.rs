//! Tape-based reverse-mode differentiation over dense row-major tensors.
//!
//! A [`Tape`] owns every tensor created during one forward pass. Ops append
//! nodes in execution order, so node ids double as a topological order and
//! [`Tape::backward`] is a single reverse sweep that visits each node exactly
//! once. The tape is built per training step and dropped after the gradients
//! have been read back.
//!
//! Determinism contract: every reduction (matmul contractions, pooling,
//! normalization moments, gradient accumulation across broadcast axes) runs
//! in a fixed index-ascending order, so identical inputs give bitwise
//! identical outputs no matter how the row-level parallelism is scheduled.

use rayon::prelude::*;

use super::kernels::{col2im_add, im2col, mm_nn, mm_nt, mm_tn};
use super::scalar::Scalar;
use crate::error::{Error, Result};

/// Handle to a tensor stored on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    Gelu { a: usize },
    Softmax { a: usize, axis: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, eps: f64 },
    AvgPool1d { a: usize },
    Upsample1d { a: usize },
    Conv2d { x: usize, w: usize, b: usize, stride: (usize, usize), pad: (usize, usize) },
    GlobalAvgPool { x: usize },
    Permute { a: usize, perm: Vec<usize> },
    Reshape { a: usize },
    Concat { parts: Vec<usize>, axis: usize },
    Slice { a: usize, axis: usize, start: usize, len: usize },
    SumAll { a: usize },
    MeanAll { a: usize },
}

struct Node<S> {
    data: Vec<S>,
    shape: Vec<usize>,
    grad: Option<Vec<S>>,
    needs_grad: bool,
    op: Op,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// numpy-style broadcast of two shapes.
fn broadcast_shapes(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da != db && da != 1 && db != 1 {
            return Err(Error::ShapeMismatch { op, lhs: a.to_vec(), rhs: b.to_vec() });
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

/// Strides of `shape` inside the broadcast result `out`: 0 on expanded axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let offset = out.len() - shape.len();
    let mut bs = vec![0usize; out.len()];
    for i in 0..shape.len() {
        bs[offset + i] = if shape[i] == 1 { 0 } else { own[i] };
    }
    bs
}

/// True when `small`, right-aligned against `big`, matches exactly so that
/// broadcasting reduces to tiling along the leading axes.
fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

/// Walks flat offsets of a shape viewed through broadcast strides.
struct Odometer<'a> {
    shape: &'a [usize],
    coords: Vec<usize>,
    bstrides: &'a [usize],
    offset: usize,
}

impl<'a> Odometer<'a> {
    fn new(shape: &'a [usize], bstrides: &'a [usize]) -> Self {
        Odometer { shape, coords: vec![0; shape.len()], bstrides, offset: 0 }
    }

    #[inline]
    fn advance(&mut self) {
        for d in (0..self.shape.len()).rev() {
            self.coords[d] += 1;
            self.offset += self.bstrides[d];
            if self.coords[d] < self.shape[d] {
                return;
            }
            self.offset -= self.bstrides[d] * self.shape[d];
            self.coords[d] = 0;
        }
    }
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn data(&self, id: ValueId) -> &[S] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn grad(&self, id: ValueId) -> Option<&[S]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn scalar_value(&self, id: ValueId) -> S {
        self.nodes[id.0].data[0]
    }

    fn push(&mut self, op_name: &'static str, data: Vec<S>, shape: Vec<usize>, needs_grad: bool, op: Op) -> Result<ValueId> {
        debug_assert_eq!(data.len(), numel(&shape));
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node { data, shape, grad: None, needs_grad, op });
        Ok(ValueId(self.nodes.len() - 1))
    }

    /// Constant input; gradients do not flow into it.
    pub fn leaf(&mut self, data: Vec<S>, shape: Vec<usize>) -> Result<ValueId> {
        if data.len() != numel(&shape) {
            return Err(Error::ShapeMismatch { op: "leaf", lhs: vec![data.len()], rhs: shape });
        }
        self.push("leaf", data, shape, false, Op::Leaf)
    }

    /// Trainable input; `backward` populates its gradient.
    pub fn param(&mut self, data: Vec<S>, shape: Vec<usize>) -> Result<ValueId> {
        if data.len() != numel(&shape) {
            return Err(Error::ShapeMismatch { op: "param", lhs: vec![data.len()], rhs: shape });
        }
        self.push("param", data, shape, true, Op::Leaf)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    // ---- elementwise with broadcasting ----------------------------------

    fn binary(&mut self, op_name: &'static str, a: ValueId, b: ValueId, f: impl Fn(S, S) -> S, op: Op) -> Result<ValueId> {
        let (an, bn) = (&self.nodes[a.0], &self.nodes[b.0]);
        let out_shape = broadcast_shapes(op_name, &an.shape, &bn.shape)?;
        let n = numel(&out_shape);
        let mut data = vec![S::ZERO; n];
        if an.shape == bn.shape {
            for ((o, x), y) in data.iter_mut().zip(&an.data).zip(&bn.data) {
                *o = f(*x, *y);
            }
        } else if out_shape == an.shape && is_suffix(&bn.shape, &an.shape) {
            let bl = bn.data.len();
            for (chunk, out) in an.data.chunks(bl).zip(data.chunks_mut(bl)) {
                for ((o, x), y) in out.iter_mut().zip(chunk).zip(&bn.data) {
                    *o = f(*x, *y);
                }
            }
        } else {
            let bsa = broadcast_strides(&an.shape, &out_shape);
            let bsb = broadcast_strides(&bn.shape, &out_shape);
            let mut oa = Odometer::new(&out_shape, &bsa);
            let mut ob = Odometer::new(&out_shape, &bsb);
            for o in data.iter_mut() {
                *o = f(an.data[oa.offset], bn.data[ob.offset]);
                oa.advance();
                ob.advance();
            }
        }
        let needs = self.needs(&[a.0, b.0]);
        self.push(op_name, data, out_shape, needs, op)
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary("add", a, b, |x, y| x + y, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul { a: a.0, b: b.0 })
    }

    pub fn scale(&mut self, a: ValueId, c: f64) -> Result<ValueId> {
        let an = &self.nodes[a.0];
        let cs = S::from_f64(c);
        let data = an.data.iter().map(|&x| x * cs).collect();
        let shape = an.shape.clone();
        let needs = an.needs_grad;
        self.push("scale", data, shape, needs, Op::Scale { a: a.0, c })
    }

    pub fn gelu(&mut self, a: ValueId) -> Result<ValueId> {
        let an = &self.nodes[a.0];
        let data = an.data.iter().map(|&x| gelu_fwd(x)).collect();
        let shape = an.shape.clone();
        let needs = an.needs_grad;
        self.push("gelu", data, shape, needs, Op::Gelu { a: a.0 })
    }

    // ---- softmax / layer norm -------------------------------------------

    pub fn softmax(&mut self, a: ValueId, axis: usize) -> Result<ValueId> {
        let an = &self.nodes[a.0];
        let rank = an.shape.len();
        if axis >= rank {
            return Err(Error::InvalidAxis { op: "softmax", axis, rank });
        }
        let axis_len = an.shape[axis];
        let inner: usize = an.shape[axis + 1..].iter().product();
        let outer: usize = an.shape[..axis].iter().product();
        let mut data = vec![S::ZERO; an.data.len()];
        if inner == 1 {
            let src = &an.data;
            let rows = outer;
            let run = |r: usize, out: &mut [S]| {
                let row = &src[r * axis_len..(r + 1) * axis_len];
                softmax_row(row, out);
            };
            if rows >= 64 {
                data.par_chunks_mut(axis_len).enumerate().for_each(|(r, out)| run(r, out));
            } else {
                for (r, out) in data.chunks_mut(axis_len).enumerate() {
                    run(r, out);
                }
            }
        } else {
            let mut col = vec![S::ZERO; axis_len];
            let mut out_col = vec![S::ZERO; axis_len];
            for o in 0..outer {
                for i in 0..inner {
                    for j in 0..axis_len {
                        col[j] = an.data[(o * axis_len + j) * inner + i];
                    }
                    softmax_row(&col, &mut out_col);
                    for j in 0..axis_len {
                        data[(o * axis_len + j) * inner + i] = out_col[j];
                    }
                }
            }
        }
        let shape = an.shape.clone();
        let needs = an.needs_grad;
        self.push("softmax", data, shape, needs, Op::Softmax { a: a.0, axis })
    }

    /// Normalizes the last axis to zero mean / unit variance, then applies
    /// the elementwise affine `gain`/`bias` (both 1-D of the last extent).
    pub fn layer_norm(&mut self, x: ValueId, gain: ValueId, bias: ValueId, eps: f64) -> Result<ValueId> {
        let xn = &self.nodes[x.0];
        let d = *xn.shape.last().ok_or(Error::InvalidAxis { op: "layer_norm", axis: 0, rank: 0 })?;
        for w in [gain, bias] {
            if self.nodes[w.0].shape != [d] {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    lhs: self.nodes[x.0].shape.clone(),
                    rhs: self.nodes[w.0].shape.clone(),
                });
            }
        }
        let (xn, gn, bn) = (&self.nodes[x.0], &self.nodes[gain.0], &self.nodes[bias.0]);
        let epss = S::from_f64(eps);
        let inv_d = S::from_f64(1.0 / d as f64);
        let mut data = vec![S::ZERO; xn.data.len()];
        for (row, out) in xn.data.chunks(d).zip(data.chunks_mut(d)) {
            let mut mean = S::ZERO;
            for &v in row {
                mean += v;
            }
            mean *= inv_d;
            let mut var = S::ZERO;
            for &v in row {
                let c = v - mean;
                var += c * c;
            }
            var *= inv_d;
            let istd = S::ONE / (var + epss).sqrt();
            for ((o, &v), (&g, &b)) in out.iter_mut().zip(row).zip(gn.data.iter().zip(&bn.data)) {
                *o = (v - mean) * istd * g + b;
            }
        }
        let shape = xn.shape.clone();
        let needs = self.needs(&[x.0, gain.0, bias.0]);
        self.push("layer_norm", data, shape, needs, Op::LayerNorm { x: x.0, gain: gain.0, bias: bias.0, eps })
    }

    // ---- pooling / resampling -------------------------------------------

    /// Mean over adjacent pairs of the last axis (kernel 2, stride 2).
    pub fn avg_pool_1d(&mut self, a: ValueId) -> Result<ValueId> {
        let an = &self.nodes[a.0];
        let f = *an.shape.last().ok_or(Error::InvalidAxis { op: "avg_pool_1d", axis: 0, rank: 0 })?;
        if f % 2 != 0 {
            return Err(Error::Geometry { op: "avg_pool_1d", detail: format!("last extent {f} is odd") });
        }
        let half = S::from_f64(0.5);
        let mut data = vec![S::ZERO; an.data.len() / 2];
        for (row, out) in an.data.chunks(f).zip(data.chunks_mut(f / 2)) {
            for (o, pair) in out.iter_mut().zip(row.chunks(2)) {
                *o = (pair[0] + pair[1]) * half;
            }
        }
        let mut shape = an.shape.clone();
        *shape.last_mut().unwrap() = f / 2;
        let needs = an.needs_grad;
        self.push("avg_pool_1d", data, shape, needs, Op::AvgPool1d { a: a.0 })
    }

    /// Nearest-neighbour 2x upsampling of the last axis.
    pub fn upsample_nearest_1d(&mut self, a: ValueId) -> Result<ValueId> {
        let an = &self.nodes[a.0];
        let f = *an.shape.last().ok_or(Error::InvalidAxis { op: "upsample_nearest_1d", axis: 0, rank: 0 })?;
        let mut data = vec![S::ZERO; an.data.len() * 2];
        for (row, out) in an.data.chunks(f).zip(data.chunks_mut(f * 2)) {
            for (o, &v) in out.chunks_mut(2).zip(row) {
                o[0] = v;
                o[1] = v;
            }
        }
        let mut shape = an.shape.clone();
        *shape.last_mut().unwrap() = f * 2;
        let needs = an.needs_grad;
        self.push("upsample_nearest_1d", data, shape, needs, Op::Upsample1d { a: a.0 })
    }

    /// Global spatial mean: (B, C, H, W) -> (B, C, 1, 1).
    pub fn adaptive_avg_pool_2d(&mut self, x: ValueId) -> Result<ValueId> {
        let xn = &self.nodes[x.0];
        if xn.shape.len() != 4 {
            return Err(Error::ShapeMismatch { op: "adaptive_avg_pool_2d", lhs: xn.shape.clone(), rhs: vec![0, 0, 0, 0] });
        }
        let (b, c, h, w) = (xn.shape[0], xn.shape[1], xn.shape[2], xn.shape[3]);
        let inv = S::from_f64(1.0 / (h * w) as f64);
        let mut data = vec![S::ZERO; b * c];
        for (o, plane) in data.iter_mut().zip(xn.data.chunks(h * w)) {
            let mut s = S::ZERO;
            for &v in plane {
                s += v;
            }
            *o = s * inv;
        }
        let needs = xn.needs_grad;
        self.push("adaptive_avg_pool_2d", data, vec![b, c, 1, 1], needs, Op::GlobalAvgPool { x: x.0 })
    }

    // ---- conv2d ----------------------------------------------------------

    /// Cross-correlation: x (B, Cin, H, W) * w (Cout, Cin, kh, kw) + bias (Cout).
    pub fn conv2d(&mut self, x: ValueId, w: ValueId, bias: ValueId, stride: (usize, usize), pad: (usize, usize)) -> Result<ValueId> {
        let (xs, ws) = (self.nodes[x.0].shape.clone(), self.nodes[w.0].shape.clone());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(Error::ShapeMismatch { op: "conv2d", lhs: xs, rhs: ws });
        }
        let (b, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        if self.nodes[bias.0].shape != [cout] {
            return Err(Error::ShapeMismatch { op: "conv2d", lhs: self.nodes[bias.0].shape.clone(), rhs: vec![cout] });
        }
        if h + 2 * pad.0 < kh || wd + 2 * pad.1 < kw || stride.0 == 0 || stride.1 == 0 {
            return Err(Error::Geometry {
                op: "conv2d",
                detail: format!(
                    "kernel {kh}x{kw} stride {stride:?} does not fit padded input {}x{}",
                    h + 2 * pad.0,
                    wd + 2 * pad.1
                ),
            });
        }
        let oh = (h + 2 * pad.0 - kh) / stride.0 + 1;
        let ow = (wd + 2 * pad.1 - kw) / stride.1 + 1;
        let ckk = cin * kh * kw;
        let ncols = oh * ow;

        let xd = &self.nodes[x.0].data;
        let wd_ = &self.nodes[w.0].data;
        let bd = &self.nodes[bias.0].data;
        let mut data = vec![S::ZERO; b * cout * ncols];
        let run = |bi: usize, out: &mut [S]| {
            let mut col = vec![S::ZERO; ckk * ncols];
            im2col(&xd[bi * cin * h * wd..], &mut col, cin, h, wd, kh, kw, stride, pad, oh, ow);
            mm_nn(wd_, &col, out, cout, ckk, ncols);
            for (c, orow) in out.chunks_mut(ncols).enumerate() {
                let bc = bd[c];
                for o in orow.iter_mut() {
                    *o += bc;
                }
            }
        };
        if b > 1 {
            data.par_chunks_mut(cout * ncols).enumerate().for_each(|(bi, out)| run(bi, out));
        } else {
            run(0, &mut data);
        }
        let needs = self.needs(&[x.0, w.0, bias.0]);
        self.push("conv2d", data, vec![b, cout, oh, ow], needs, Op::Conv2d { x: x.0, w: w.0, b: bias.0, stride, pad })
    }

    // ---- layout ops ------------------------------------------------------

    pub fn reshape(&mut self, a: ValueId, shape: Vec<usize>) -> Result<ValueId> {
        let an = &self.nodes[a.0];
        if numel(&shape) != an.data.len() {
            return Err(Error::ShapeMismatch { op: "reshape", lhs: an.shape.clone(), rhs: shape });
        }
        let data = an.data.clone();
        let needs = an.needs_grad;
        self.push("reshape", data, shape, needs, Op::Reshape { a: a.0 })
    }

    pub fn permute(&mut self, a: ValueId, perm: &[usize]) -> Result<ValueId> {
        let an = &self.nodes[a.0];
        let rank = an.shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Geometry { op: "permute", detail: format!("{perm:?} is not a permutation of rank {rank}") });
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| an.shape[p]).collect();
        let in_strides = strides(&an.shape);
        let perm_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let mut data = vec![S::ZERO; an.data.len()];
        let mut odo = Odometer::new(&out_shape, &perm_strides);
        for o in data.iter_mut() {
            *o = an.data[odo.offset];
            odo.advance();
        }
        let needs = an.needs_grad;
        self.push("permute", data, out_shape, needs, Op::Permute { a: a.0, perm: perm.to_vec() })
    }

    pub fn concat(&mut self, parts: &[ValueId], axis: usize) -> Result<ValueId> {
        let first = &self.nodes[parts[0].0].shape;
        let rank = first.len();
        if axis >= rank {
            return Err(Error::InvalidAxis { op: "concat", axis, rank });
        }
        let mut axis_total = 0;
        for p in parts {
            let s = &self.nodes[p.0].shape;
            if s.len() != rank || s[..axis] != first[..axis] || s[axis + 1..] != first[axis + 1..] {
                return Err(Error::ShapeMismatch { op: "concat", lhs: first.clone(), rhs: s.clone() });
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let tail: usize = first[axis + 1..].iter().product();
        let mut data = vec![S::ZERO; numel(&out_shape)];
        let out_inner = axis_total * tail;
        let mut off = 0;
        for p in parts {
            let pn = &self.nodes[p.0];
            let inner = pn.shape[axis] * tail;
            for o in 0..outer {
                data[o * out_inner + off..o * out_inner + off + inner]
                    .copy_from_slice(&pn.data[o * inner..(o + 1) * inner]);
            }
            off += inner;
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let needs = self.needs(&ids);
        self.push("concat", data, out_shape, needs, Op::Concat { parts: ids, axis })
    }

    pub fn slice(&mut self, a: ValueId, axis: usize, start: usize, len: usize) -> Result<ValueId> {
        let an = &self.nodes[a.0];
        let rank = an.shape.len();
        if axis >= rank {
            return Err(Error::InvalidAxis { op: "slice", axis, rank });
        }
        if start + len > an.shape[axis] {
            return Err(Error::Geometry {
                op: "slice",
                detail: format!("range {start}..{} exceeds extent {}", start + len, an.shape[axis]),
            });
        }
        let outer: usize = an.shape[..axis].iter().product();
        let tail: usize = an.shape[axis + 1..].iter().product();
        let in_inner = an.shape[axis] * tail;
        let mut out_shape = an.shape.clone();
        out_shape[axis] = len;
        let mut data = vec![S::ZERO; outer * len * tail];
        for o in 0..outer {
            data[o * len * tail..(o + 1) * len * tail]
                .copy_from_slice(&an.data[o * in_inner + start * tail..o * in_inner + (start + len) * tail]);
        }
        let needs = an.needs_grad;
        self.push("slice", data, out_shape, needs, Op::Slice { a: a.0, axis, start, len })
    }

    // ---- matmul ----------------------------------------------------------

    /// Batched contraction a[..,m,k] · b[..,k,n]; leading axes broadcast.
    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ashape, bshape) = (self.nodes[a.0].shape.clone(), self.nodes[b.0].shape.clone());
        if ashape.len() < 2 || bshape.len() < 2 || ashape[ashape.len() - 1] != bshape[bshape.len() - 2] {
            return Err(Error::ShapeMismatch { op: "matmul", lhs: ashape, rhs: bshape });
        }
        let (m, k) = (ashape[ashape.len() - 2], ashape[ashape.len() - 1]);
        let n = bshape[bshape.len() - 1];
        let batch = broadcast_shapes("matmul", &ashape[..ashape.len() - 2], &bshape[..bshape.len() - 2])?;
        let mut out_shape = batch.clone();
        out_shape.extend([m, n]);

        let ad = &self.nodes[a.0].data;
        let bd = &self.nodes[b.0].data;
        let mut data = vec![S::ZERO; numel(&out_shape)];

        if bshape.len() == 2 {
            // Weight application: fold all leading axes of `a` into rows.
            let rows = ad.len() / k;
            mm_nn(ad, bd, &mut data, rows, k, n);
        } else {
            let nb = numel(&batch);
            let sa = batch_offsets(&ashape, &batch, m * k);
            let sb = batch_offsets(&bshape, &batch, k * n);
            let run = |bi: usize, out: &mut [S]| {
                mm_nn(&ad[sa[bi]..sa[bi] + m * k], &bd[sb[bi]..sb[bi] + k * n], out, m, k, n);
            };
            if nb > 1 {
                data.par_chunks_mut(m * n).enumerate().for_each(|(bi, out)| run(bi, out));
            } else if nb == 1 {
                run(0, &mut data);
            }
        }
        let needs = self.needs(&[a.0, b.0]);
        self.push("matmul", data, out_shape, needs, Op::Matmul { a: a.0, b: b.0 })
    }

    pub fn sum_all(&mut self, a: ValueId) -> Result<ValueId> {
        let an = &self.nodes[a.0];
        let mut s = S::ZERO;
        for &v in &an.data {
            s += v;
        }
        let needs = an.needs_grad;
        self.push("sum_all", vec![s], vec![1], needs, Op::SumAll { a: a.0 })
    }

    pub fn mean_all(&mut self, a: ValueId) -> Result<ValueId> {
        let an = &self.nodes[a.0];
        let inv = S::from_f64(1.0 / an.data.len() as f64);
        let mut s = S::ZERO;
        for &v in &an.data {
            s += v;
        }
        s *= inv;
        let needs = an.needs_grad;
        self.push("mean_all", vec![s], vec![1], needs, Op::MeanAll { a: a.0 })
    }

    /// Mean of elementwise squared difference; the Eq.-style MSE loss head.
    pub fn mse(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean_all(sq)
    }

    // ---- backward --------------------------------------------------------

    fn add_grad(&mut self, id: usize, contrib: Vec<S>) {
        if !self.nodes[id].needs_grad {
            return;
        }
        match &mut self.nodes[id].grad {
            Some(g) => {
                for (gx, cx) in g.iter_mut().zip(&contrib) {
                    *gx += *cx;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    /// Reverse sweep from a scalar loss. Populates gradients of every
    /// `param` leaf reachable from it; intermediate gradients are dropped as
    /// soon as they have been consumed.
    pub fn backward(&mut self, loss: ValueId) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::NonScalarLoss { shape: self.nodes[loss.0].shape.clone() });
        }
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![S::ONE]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad || matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[id].grad.take() else { continue };
            let op = self.nodes[id].op.clone();
            self.backward_op(id, &op, &g)?;
        }
        Ok(())
    }

    fn backward_op(&mut self, id: usize, op: &Op, g: &[S]) -> Result<()> {
        match *op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                self.bwd_broadcast(id, a, g, |_x, _y, gv| gv);
                self.bwd_broadcast_rhs(id, a, b, g, |_x, _y, gv| gv);
            }
            Op::Sub { a, b } => {
                self.bwd_broadcast(id, a, g, |_x, _y, gv| gv);
                self.bwd_broadcast_rhs(id, a, b, g, |_x, _y, gv| -gv);
            }
            Op::Mul { a, b } => {
                self.bwd_mul(id, a, b, g);
            }
            Op::Scale { a, c } => {
                let cs = S::from_f64(c);
                let contrib = g.iter().map(|&gv| gv * cs).collect();
                self.add_grad(a, contrib);
            }
            Op::Gelu { a } => {
                if self.nodes[a].needs_grad {
                    let contrib: Vec<S> = self.nodes[a].data.iter().zip(g).map(|(&x, &gv)| gv * gelu_bwd(x)).collect();
                    self.add_grad(a, contrib);
                }
            }
            Op::Softmax { a, axis } => self.bwd_softmax(id, a, axis, g),
            Op::LayerNorm { x, gain, bias, eps } => self.bwd_layer_norm(x, gain, bias, eps, g),
            Op::AvgPool1d { a } => {
                let half = S::from_f64(0.5);
                let f_out = *self.nodes[id].shape.last().unwrap();
                let mut contrib = vec![S::ZERO; self.nodes[a].data.len()];
                for (row, go) in contrib.chunks_mut(f_out * 2).zip(g.chunks(f_out)) {
                    for (pair, &gv) in row.chunks_mut(2).zip(go) {
                        pair[0] = gv * half;
                        pair[1] = gv * half;
                    }
                }
                self.add_grad(a, contrib);
            }
            Op::Upsample1d { a } => {
                let f_in = *self.nodes[a].shape.last().unwrap();
                let mut contrib = vec![S::ZERO; self.nodes[a].data.len()];
                for (row, go) in contrib.chunks_mut(f_in).zip(g.chunks(f_in * 2)) {
                    for (o, pair) in row.iter_mut().zip(go.chunks(2)) {
                        *o = pair[0] + pair[1];
                    }
                }
                self.add_grad(a, contrib);
            }
            Op::Conv2d { x, w, b, stride, pad } => self.bwd_conv2d(id, x, w, b, stride, pad, g),
            Op::GlobalAvgPool { x } => {
                let (h, w) = (self.nodes[x].shape[2], self.nodes[x].shape[3]);
                let inv = S::from_f64(1.0 / (h * w) as f64);
                let mut contrib = vec![S::ZERO; self.nodes[x].data.len()];
                for (plane, &gv) in contrib.chunks_mut(h * w).zip(g) {
                    let gs = gv * inv;
                    plane.fill(gs);
                }
                self.add_grad(x, contrib);
            }
            Op::Permute { a, ref perm } => {
                // Scatter through the same index walk used by the forward.
                let out_shape = self.nodes[id].shape.clone();
                let in_strides = strides(&self.nodes[a].shape);
                let perm_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
                let mut contrib = vec![S::ZERO; self.nodes[a].data.len()];
                let mut odo = Odometer::new(&out_shape, &perm_strides);
                for &gv in g {
                    contrib[odo.offset] = gv;
                    odo.advance();
                }
                self.add_grad(a, contrib);
            }
            Op::Reshape { a } => {
                self.add_grad(a, g.to_vec());
            }
            Op::Concat { ref parts, axis } => {
                let out_shape = self.nodes[id].shape.clone();
                let outer: usize = out_shape[..axis].iter().product();
                let tail: usize = out_shape[axis + 1..].iter().product();
                let out_inner = out_shape[axis] * tail;
                let mut off = 0;
                for &p in parts {
                    let inner = self.nodes[p].shape[axis] * tail;
                    let mut contrib = vec![S::ZERO; self.nodes[p].data.len()];
                    for o in 0..outer {
                        contrib[o * inner..(o + 1) * inner]
                            .copy_from_slice(&g[o * out_inner + off..o * out_inner + off + inner]);
                    }
                    self.add_grad(p, contrib);
                    off += inner;
                }
            }
            Op::Slice { a, axis, start, len } => {
                let in_shape = self.nodes[a].shape.clone();
                let outer: usize = in_shape[..axis].iter().product();
                let tail: usize = in_shape[axis + 1..].iter().product();
                let in_inner = in_shape[axis] * tail;
                let mut contrib = vec![S::ZERO; self.nodes[a].data.len()];
                for o in 0..outer {
                    contrib[o * in_inner + start * tail..o * in_inner + (start + len) * tail]
                        .copy_from_slice(&g[o * len * tail..(o + 1) * len * tail]);
                }
                self.add_grad(a, contrib);
            }
            Op::SumAll { a } => {
                let gv = g[0];
                self.add_grad(a, vec![gv; self.nodes[a].data.len()]);
            }
            Op::MeanAll { a } => {
                let gv = g[0] * S::from_f64(1.0 / self.nodes[a].data.len() as f64);
                self.add_grad(a, vec![gv; self.nodes[a].data.len()]);
            }
            Op::Matmul { a, b } => self.bwd_matmul(id, a, b, g),
        }
        Ok(())
    }

    /// Gradient for the lhs of a broadcast binary op.
    fn bwd_broadcast(&mut self, out: usize, a: usize, g: &[S], f: impl Fn(S, S, S) -> S) {
        if !self.nodes[a].needs_grad {
            return;
        }
        let out_shape = self.nodes[out].shape.clone();
        let a_shape = self.nodes[a].shape.clone();
        let mut contrib = vec![S::ZERO; self.nodes[a].data.len()];
        if a_shape == out_shape {
            for (c, &gv) in contrib.iter_mut().zip(g) {
                *c = f(S::ZERO, S::ZERO, gv);
            }
        } else {
            let bsa = broadcast_strides(&a_shape, &out_shape);
            let mut odo = Odometer::new(&out_shape, &bsa);
            for &gv in g {
                contrib[odo.offset] += f(S::ZERO, S::ZERO, gv);
                odo.advance();
            }
        }
        self.add_grad(a, contrib);
    }

    /// Gradient for the rhs of a broadcast binary op (may need reduction).
    fn bwd_broadcast_rhs(&mut self, out: usize, _a: usize, b: usize, g: &[S], f: impl Fn(S, S, S) -> S) {
        if !self.nodes[b].needs_grad {
            return;
        }
        let out_shape = self.nodes[out].shape.clone();
        let b_shape = self.nodes[b].shape.clone();
        let mut contrib = vec![S::ZERO; self.nodes[b].data.len()];
        if b_shape == out_shape {
            for (c, &gv) in contrib.iter_mut().zip(g) {
                *c = f(S::ZERO, S::ZERO, gv);
            }
        } else if is_suffix(&b_shape, &out_shape) {
            let bl = contrib.len();
            for chunk in g.chunks(bl) {
                for (c, &gv) in contrib.iter_mut().zip(chunk) {
                    *c += f(S::ZERO, S::ZERO, gv);
                }
            }
        } else {
            let bsb = broadcast_strides(&b_shape, &out_shape);
            let mut odo = Odometer::new(&out_shape, &bsb);
            for &gv in g {
                contrib[odo.offset] += f(S::ZERO, S::ZERO, gv);
                odo.advance();
            }
        }
        self.add_grad(b, contrib);
    }

    fn bwd_mul(&mut self, out: usize, a: usize, b: usize, g: &[S]) {
        let out_shape = self.nodes[out].shape.clone();
        for (dst, src) in [(a, b), (b, a)] {
            if !self.nodes[dst].needs_grad {
                continue;
            }
            let dst_shape = self.nodes[dst].shape.clone();
            let src_shape = self.nodes[src].shape.clone();
            let mut contrib = vec![S::ZERO; self.nodes[dst].data.len()];
            let src_data = &self.nodes[src].data;
            if dst_shape == out_shape && src_shape == out_shape {
                for ((c, &gv), &sv) in contrib.iter_mut().zip(g).zip(src_data) {
                    *c = gv * sv;
                }
            } else {
                let bs_dst = broadcast_strides(&dst_shape, &out_shape);
                let bs_src = broadcast_strides(&src_shape, &out_shape);
                let mut od = Odometer::new(&out_shape, &bs_dst);
                let mut os = Odometer::new(&out_shape, &bs_src);
                for &gv in g {
                    contrib[od.offset] += gv * src_data[os.offset];
                    od.advance();
                    os.advance();
                }
            }
            self.add_grad(dst, contrib);
        }
    }

    fn bwd_softmax(&mut self, out: usize, a: usize, axis: usize, g: &[S]) {
        if !self.nodes[a].needs_grad {
            return;
        }
        let shape = self.nodes[out].shape.clone();
        let axis_len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let p = &self.nodes[out].data;
        let mut contrib = vec![S::ZERO; p.len()];
        if inner == 1 {
            for ((prow, grow), crow) in p.chunks(axis_len).zip(g.chunks(axis_len)).zip(contrib.chunks_mut(axis_len)) {
                let mut dot = S::ZERO;
                for (&pv, &gv) in prow.iter().zip(grow) {
                    dot += pv * gv;
                }
                for ((c, &pv), &gv) in crow.iter_mut().zip(prow).zip(grow) {
                    *c = pv * (gv - dot);
                }
            }
        } else {
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * axis_len + j) * inner + i;
                    let mut dot = S::ZERO;
                    for j in 0..axis_len {
                        dot += p[idx(j)] * g[idx(j)];
                    }
                    for j in 0..axis_len {
                        contrib[idx(j)] = p[idx(j)] * (g[idx(j)] - dot);
                    }
                }
            }
        }
        self.add_grad(a, contrib);
    }

    fn bwd_layer_norm(&mut self, x: usize, gain: usize, bias: usize, eps: f64, g: &[S]) {
        let d = *self.nodes[x].shape.last().unwrap();
        let inv_d = S::from_f64(1.0 / d as f64);
        let epss = S::from_f64(eps);
        let xd = &self.nodes[x].data;
        let gd = &self.nodes[gain].data;

        let mut dx = vec![S::ZERO; xd.len()];
        let mut dgain = vec![S::ZERO; d];
        let mut dbias = vec![S::ZERO; d];
        let mut xhat = vec![S::ZERO; d];
        let rows = xd.len() / d;
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let grow = &g[r * d..(r + 1) * d];
            let mut mean = S::ZERO;
            for &v in row {
                mean += v;
            }
            mean *= inv_d;
            let mut var = S::ZERO;
            for &v in row {
                let c = v - mean;
                var += c * c;
            }
            var *= inv_d;
            let istd = S::ONE / (var + epss).sqrt();
            for (xh, &v) in xhat.iter_mut().zip(row) {
                *xh = (v - mean) * istd;
            }
            let mut m1 = S::ZERO; // mean of gain-scaled upstream grad
            let mut m2 = S::ZERO; // mean of (gain-scaled grad) * xhat
            for ((&gv, &gw), &xh) in grow.iter().zip(gd).zip(&xhat) {
                let gj = gv * gw;
                m1 += gj;
                m2 += gj * xh;
            }
            m1 *= inv_d;
            m2 *= inv_d;
            let drow = &mut dx[r * d..(r + 1) * d];
            for j in 0..d {
                let gj = grow[j] * gd[j];
                drow[j] = istd * (gj - m1 - xhat[j] * m2);
                dgain[j] += grow[j] * xhat[j];
                dbias[j] += grow[j];
            }
        }
        self.add_grad(x, dx);
        self.add_grad(gain, dgain);
        self.add_grad(bias, dbias);
    }

    fn bwd_matmul(&mut self, _out: usize, a: usize, b: usize, g: &[S]) {
        let ashape = self.nodes[a].shape.clone();
        let bshape = self.nodes[b].shape.clone();
        let (m, k) = (ashape[ashape.len() - 2], ashape[ashape.len() - 1]);
        let n = bshape[bshape.len() - 1];
        let need_a = self.nodes[a].needs_grad;
        let need_b = self.nodes[b].needs_grad;

        let (da, db) = {
            let ad = &self.nodes[a].data;
            let bd = &self.nodes[b].data;
            let mut da = need_a.then(|| vec![S::ZERO; ad.len()]);
            let mut db = need_b.then(|| vec![S::ZERO; bd.len()]);

            if bshape.len() == 2 {
                let rows = ad.len() / k;
                if let Some(da) = da.as_mut() {
                    mm_nt(g, bd, da, rows, n, k);
                }
                if let Some(db) = db.as_mut() {
                    mm_tn(ad, g, db, rows, k, n);
                }
            } else {
                let batch =
                    broadcast_shapes("matmul", &ashape[..ashape.len() - 2], &bshape[..bshape.len() - 2]).unwrap();
                let nb = numel(&batch);
                let sa = batch_offsets(&ashape, &batch, m * k);
                let sb = batch_offsets(&bshape, &batch, k * n);
                let a_bcast = numel(&ashape) != nb * m * k;
                let b_bcast = numel(&bshape) != nb * k * n;

                if let Some(da) = da.as_mut() {
                    if !a_bcast {
                        da.par_chunks_mut(m * k).enumerate().for_each(|(bi, out_c)| {
                            mm_nt(&g[bi * m * n..(bi + 1) * m * n], &bd[sb[bi]..sb[bi] + k * n], out_c, m, n, k);
                        });
                    } else {
                        let mut tmp = vec![S::ZERO; m * k];
                        for bi in 0..nb {
                            mm_nt(&g[bi * m * n..(bi + 1) * m * n], &bd[sb[bi]..sb[bi] + k * n], &mut tmp, m, n, k);
                            for (dst, &t) in da[sa[bi]..sa[bi] + m * k].iter_mut().zip(&tmp) {
                                *dst += t;
                            }
                        }
                    }
                }
                if let Some(db) = db.as_mut() {
                    if !b_bcast {
                        db.par_chunks_mut(k * n).enumerate().for_each(|(bi, out_c)| {
                            mm_tn(&ad[sa[bi]..sa[bi] + m * k], &g[bi * m * n..(bi + 1) * m * n], out_c, m, k, n);
                        });
                    } else {
                        let mut tmp = vec![S::ZERO; k * n];
                        for bi in 0..nb {
                            mm_tn(&ad[sa[bi]..sa[bi] + m * k], &g[bi * m * n..(bi + 1) * m * n], &mut tmp, m, k, n);
                            for (dst, &t) in db[sb[bi]..sb[bi] + k * n].iter_mut().zip(&tmp) {
                                *dst += t;
                            }
                        }
                    }
                }
            }
            (da, db)
        };
        if let Some(da) = da {
            self.add_grad(a, da);
        }
        if let Some(db) = db {
            self.add_grad(b, db);
        }
    }

    fn bwd_conv2d(&mut self, out: usize, x: usize, w: usize, b: usize, stride: (usize, usize), pad: (usize, usize), g: &[S]) {
        let xs = self.nodes[x].shape.clone();
        let ws = self.nodes[w].shape.clone();
        let os = self.nodes[out].shape.clone();
        let (bsz, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        let (oh, ow) = (os[2], os[3]);
        let ckk = cin * kh * kw;
        let ncols = oh * ow;
        let xd = &self.nodes[x].data;
        let wd_ = &self.nodes[w].data;

        let need_x = self.nodes[x].needs_grad;
        let need_w = self.nodes[w].needs_grad;
        let need_b = self.nodes[b].needs_grad;

        let (dx, dw, db) = {
            let mut dx = if need_x { vec![S::ZERO; xd.len()] } else { Vec::new() };
            let mut dw = if need_w { vec![S::ZERO; wd_.len()] } else { Vec::new() };
            let mut db = if need_b { vec![S::ZERO; cout] } else { Vec::new() };
            let mut col = vec![S::ZERO; ckk * ncols];
            let mut tmp_w = vec![S::ZERO; ckk * cout];
            let mut dcol = vec![S::ZERO; ckk * ncols];
            for bi in 0..bsz {
                let gb = &g[bi * cout * ncols..(bi + 1) * cout * ncols];
                if need_w {
                    im2col(&xd[bi * cin * h * wd..], &mut col, cin, h, wd, kh, kw, stride, pad, oh, ow);
                    mm_nt(gb, &col, &mut tmp_w, cout, ncols, ckk);
                    for (dst, &t) in dw.iter_mut().zip(&tmp_w) {
                        *dst += t;
                    }
                }
                if need_b {
                    for (c, grow) in gb.chunks(ncols).enumerate() {
                        let mut s = S::ZERO;
                        for &gv in grow {
                            s += gv;
                        }
                        db[c] += s;
                    }
                }
                if need_x {
                    mm_tn(wd_, gb, &mut dcol, cout, ckk, ncols);
                    col2im_add(&dcol, &mut dx[bi * cin * h * wd..(bi + 1) * cin * h * wd], cin, h, wd, kh, kw, stride, pad, oh, ow);
                }
            }
            (dx, dw, db)
        };
        if need_x {
            self.add_grad(x, dx);
        }
        if need_w {
            self.add_grad(w, dw);
        }
        if need_b {
            self.add_grad(b, db);
        }
    }
}

/// Per-batch flat offsets of a possibly-broadcast operand.
fn batch_offsets(shape: &[usize], batch: &[usize], mat_size: usize) -> Vec<usize> {
    let own_batch = &shape[..shape.len() - 2];
    let bs = broadcast_strides(own_batch, batch);
    let nb = numel(batch);
    let mut offs = Vec::with_capacity(nb);
    let mut odo = Odometer::new(batch, &bs);
    for _ in 0..nb {
        offs.push(odo.offset * mat_size);
        odo.advance();
    }
    offs
}

fn softmax_row<S: Scalar>(row: &[S], out: &mut [S]) {
    let mut m = row[0];
    for &v in row {
        m = m.max(v);
    }
    let mut sum = S::ZERO;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - m).exp();
        *o = e;
        sum += e;
    }
    let inv = S::ONE / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

// tanh approximation; its exact derivative is used in the backward pass.
const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

#[inline]
fn gelu_fwd<S: Scalar>(x: S) -> S {
    let c = S::from_f64(GELU_C);
    let a = S::from_f64(GELU_A);
    let half = S::from_f64(0.5);
    let u = c * (x + a * x.powi(3));
    half * x * (S::ONE + u.tanh())
}

#[inline]
fn gelu_bwd<S: Scalar>(x: S) -> S {
    let c = S::from_f64(GELU_C);
    let a = S::from_f64(GELU_A);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let u = c * (x + a * x.powi(3));
    let t = u.tanh();
    let sech2 = S::ONE - t * t;
    half * (S::ONE + t) + half * x * sech2 * c * (S::ONE + three * a * x * x)
}
