//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs for the backward pass. Nodes are appended in evaluation order, so the
//! tape is topologically sorted by construction and [`Graph::backward`] walks
//! it once in reverse.

use super::tensor::{axis_split, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    #[default]
    Double,
    /// Node values are rounded to `f32` after every operation.
    Single,
}

/// Behaviour of [`Graph::l1_normalize`] when a slice has (almost) no mass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DenomPolicy {
    /// Add the floor to the denominator when the L1 sum falls below it.
    Floor(f64),
    /// Fail with [`Error::DegenerateDenominator`] when the sum falls below the floor.
    Strict(f64),
}

impl Default for DenomPolicy {
    fn default() -> Self {
        DenomPolicy::Floor(1e-12)
    }
}

impl DenomPolicy {
    fn apply(self, sum: &mut f64) -> Result<()> {
        match self {
            DenomPolicy::Floor(floor) if *sum < floor => *sum += floor,
            DenomPolicy::Strict(floor) if *sum < floor || *sum == 0.0 => {
                return Err(Error::DegenerateDenominator {
                    op: "l1_normalize",
                    sum: *sum,
                    floor,
                })
            }
            _ => {}
        }
        Ok(())
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    ScaleRows(Var, Var),
    Matmul(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize },
    Reshape(Var),
    Softmax { x: Var, axis: usize },
    L1Normalize { x: Var, axis: usize, denoms: Vec<f64> },
    Gather { x: Var, index: Vec<usize> },
    Bmv(Var, Var),
    L1Bmv { w: Var, v: Var, denoms: Vec<f64> },
    DiagEmbed(Var),
    Bce { pred: Var, labels: Vec<f64> },
}

/// A single computation graph. Not shared across threads; build one per
/// evaluation.
#[derive(Debug, Default)]
pub struct Graph {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    needs_grad: Vec<bool>,
    precision: Precision,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` participates in the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as an owned tensor shaped like the node value; zeros when the
    /// node did not influence the loss.
    pub fn tensor(&self, graph: &Graph, v: Var) -> Tensor {
        let shape = graph.value(v).shape().to_vec();
        match self.get(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_precision(precision: Precision) -> Self {
        Self {
            precision,
            ..Self::default()
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    /// Bytes held by the tape: node values plus saved backward state.
    pub fn tape_bytes(&self) -> usize {
        let values: usize = self.values.iter().map(Tensor::nbytes).sum();
        let saved: usize = self
            .ops
            .iter()
            .map(|op| match op {
                Op::L1Normalize { denoms, .. } | Op::L1Bmv { denoms, .. } => denoms.len() * 8,
                Op::Gather { index, .. } => index.len() * std::mem::size_of::<usize>(),
                Op::Bce { labels, .. } => labels.len() * 8,
                _ => 0,
            })
            .sum();
        values + saved
    }

    /// A value that does not receive gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, false)
    }

    /// A leaf that receives gradients.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, true)
    }

    /// Which side of its kink every non-smooth input sits on: relu inputs,
    /// the entries under an L1 norm and the clamped BCE predictions. Two
    /// evaluations with equal patterns lie on the same smooth piece.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for op in &self.ops {
            match op {
                Op::Relu(x) => out.extend(self.values[x.0].data().iter().map(|&v| v > 0.0)),
                Op::L1Normalize { x, .. } | Op::L1Bmv { w: x, .. } => {
                    out.extend(self.values[x.0].data().iter().map(|&v| v >= 0.0))
                }
                Op::Bce { pred, .. } => out.extend(
                    self.values[pred.0]
                        .data()
                        .iter()
                        .map(|&o| (BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&o)),
                ),
                _ => {}
            }
        }
        out
    }

    fn push_leaf(&mut self, mut t: Tensor, needs_grad: bool) -> Var {
        self.round(&mut t);
        self.values.push(t);
        self.ops.push(Op::Leaf);
        self.needs_grad.push(needs_grad);
        Var(self.values.len() - 1)
    }

    fn push(&mut self, mut value: Tensor, op: Op, inputs: &[Var]) -> Var {
        self.round(&mut value);
        let needs = inputs.iter().any(|v| self.needs_grad[v.0]);
        self.values.push(value);
        self.ops.push(op);
        self.needs_grad.push(needs);
        Var(self.values.len() - 1)
    }

    fn round(&self, t: &mut Tensor) {
        if self.precision == Precision::Single {
            t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("hadamard", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Hadamard(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.values[x.0].map(|v| c * v);
        self.push(out, Op::Scale(x, c), &[x])
    }

    /// Adds a bias vector along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (&self.values[x.0], &self.values[bias.0]);
        let width = tx.shape().last().copied().unwrap_or(1);
        if tb.numel() != width || tb.ndim() != 1 {
            return Err(Error::shape("add_bias", tx.shape(), tb.shape()));
        }
        let mut out = tx.clone();
        for row in out.data_mut().chunks_mut(width) {
            for (o, b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddBias(x, bias), &[x, bias]))
    }

    /// Multiplies every last-axis row of `x` (shape `[.., d]`) by the matching
    /// scalar of `w` (shape `[.., 1]`).
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (&self.values[x.0], &self.values[w.0]);
        let width = tx.shape().last().copied().unwrap_or(1);
        let lead_ok = tx.shape()[..tx.ndim() - 1] == tw.shape()[..tw.ndim().saturating_sub(1)];
        if tw.shape().last() != Some(&1) || !lead_ok {
            return Err(Error::shape("scale_rows", tx.shape(), tw.shape()));
        }
        let mut out = tx.clone();
        for (row, &s) in out.data_mut().chunks_mut(width).zip(tw.data()) {
            row.iter_mut().for_each(|v| *v *= s);
        }
        Ok(self.push(out, Op::ScaleRows(x, w), &[x, w]))
    }

    /// `a` of shape `[.., n]` times 2-D `b` of shape `[n, p]`; leading axes of
    /// `a` are treated as rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        if ta.ndim() < 1 || tb.ndim() != 2 || ta.shape()[ta.ndim() - 1] != tb.shape()[0] {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let n = tb.shape()[0];
        let p = tb.shape()[1];
        let m = ta.numel() / n.max(1);
        let mut out = vec![0.0; m * p];
        let (ad, bd) = (ta.data(), tb.data());
        for i in 0..m {
            let orow = &mut out[i * p..(i + 1) * p];
            for k in 0..n {
                let aik = ad[i * n + k];
                if aik == 0.0 {
                    continue;
                }
                let brow = &bd[k * p..(k + 1) * p];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += aik * bv;
                }
            }
        }
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = p;
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::Matmul(a, b), &[a, b]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.values[x.0].map(|v| v.max(0.0));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.values[x.0].map(stable_sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.values[x.0].data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = &self.values[x.0];
        let s = t.data().iter().sum::<f64>() / t.numel().max(1) as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Sums out `axis`, in ascending index order along that axis.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = &self.values[x.0];
        if axis >= t.ndim() {
            return Err(Error::invalid(format!(
                "sum_axis: axis {axis} on shape {:?}",
                t.shape()
            )));
        }
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        let d = t.data();
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for j in 0..len {
                let src = &d[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (a, b) in dst.iter_mut().zip(src) {
                    *a += b;
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::SumAxis { x, axis }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.values[x.0].clone().reshaped(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_masked(x, axis, None)
    }

    /// Softmax along `axis` restricted to entries where `mask` is true; masked
    /// entries produce exactly zero. A slice with no unmasked entries is all
    /// zeros.
    pub fn softmax_masked(&mut self, x: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var> {
        let t = &self.values[x.0];
        if axis >= t.ndim() {
            return Err(Error::invalid(format!("softmax: axis {axis} on shape {:?}", t.shape())));
        }
        if let Some(m) = mask {
            if m.len() != t.numel() {
                return Err(Error::shape("softmax mask", t.shape(), &[m.len()]));
            }
        }
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let d = t.data();
        let mut out = vec![0.0; d.len()];
        // Slices along `axis` are strided by `inner`; walk each outer block
        // row by row so memory access stays contiguous.
        let mut max = vec![0.0; inner];
        let mut total = vec![0.0; inner];
        for o in 0..outer {
            let base = o * len * inner;
            max.iter_mut().for_each(|m| *m = f64::NEG_INFINITY);
            total.iter_mut().for_each(|t| *t = 0.0);
            for j in 0..len {
                let row = base + j * inner;
                for i in 0..inner {
                    if mask.is_none_or(|m| m[row + i]) {
                        max[i] = f64::max(max[i], d[row + i]);
                    }
                }
            }
            for j in 0..len {
                let row = base + j * inner;
                for i in 0..inner {
                    if max[i] != f64::NEG_INFINITY && mask.is_none_or(|m| m[row + i]) {
                        let e = (d[row + i] - max[i]).exp();
                        out[row + i] = e;
                        total[i] += e;
                    }
                }
            }
            for j in 0..len {
                let row = base + j * inner;
                for i in 0..inner {
                    if total[i] > 0.0 {
                        out[row + i] /= total[i];
                    }
                }
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(out, Op::Softmax { x, axis }, &[x]))
    }

    /// Divides every slice along `axis` by its L1 norm.
    pub fn l1_normalize(&mut self, x: Var, axis: usize, policy: DenomPolicy) -> Result<Var> {
        let t = &self.values[x.0];
        if axis >= t.ndim() {
            return Err(Error::invalid(format!(
                "l1_normalize: axis {axis} on shape {:?}",
                t.shape()
            )));
        }
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let d = t.data();
        let mut out = vec![0.0; d.len()];
        let mut denoms = vec![0.0; outer * inner];
        if inner == 1 {
            for ((src, dst), s) in d
                .chunks_exact(len)
                .zip(out.chunks_exact_mut(len))
                .zip(denoms.iter_mut())
            {
                *s = src.iter().map(|x| x.abs()).sum();
                policy.apply(s)?;
                for (y, x) in dst.iter_mut().zip(src) {
                    *y = x / *s;
                }
            }
            let out = Tensor::new(t.shape().to_vec(), out)?;
            return Ok(self.push(out, Op::L1Normalize { x, axis, denoms }, &[x]));
        }
        for o in 0..outer {
            let base = o * len * inner;
            let sums = &mut denoms[o * inner..(o + 1) * inner];
            for j in 0..len {
                let row = &d[base + j * inner..base + (j + 1) * inner];
                for (s, x) in sums.iter_mut().zip(row) {
                    *s += x.abs();
                }
            }
            for s in sums.iter_mut() {
                policy.apply(s)?;
            }
            for j in 0..len {
                let at = base + j * inner;
                for i in 0..inner {
                    out[at + i] = d[at + i] / sums[i];
                }
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(out, Op::L1Normalize { x, axis, denoms }, &[x]))
    }

    /// Selects rows (first-axis slices) of `x` by index; indices may repeat.
    pub fn gather(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let t = &self.values[x.0];
        if t.ndim() == 0 {
            return Err(Error::invalid("gather on a scalar"));
        }
        let rows = t.shape()[0];
        let width = t.row_width();
        let mut out = Vec::with_capacity(index.len() * width);
        for &r in index {
            if r >= rows {
                return Err(Error::invalid(format!("gather index {r} out of range for {rows} rows")));
            }
            out.extend_from_slice(t.row(r));
        }
        let mut shape = t.shape().to_vec();
        shape[0] = index.len();
        let out = Tensor::new(shape, out)?;
        Ok(self.push(
            out,
            Op::Gather {
                x,
                index: index.to_vec(),
            },
            &[x],
        ))
    }

    /// Batched matrix-vector product: `w` is `[P, r, c]`, `v` is `[P, c]`,
    /// result is `[P, r]` with `out[p] = w[p] · v[p]`.
    pub fn bmv(&mut self, w: Var, v: Var) -> Result<Var> {
        let (tw, tv) = (&self.values[w.0], &self.values[v.0]);
        if tw.ndim() != 3 || tv.ndim() != 2 || tw.shape()[0] != tv.shape()[0] || tw.shape()[2] != tv.shape()[1] {
            return Err(Error::shape("bmv", tw.shape(), tv.shape()));
        }
        let (p, r, c) = (tw.shape()[0], tw.shape()[1], tw.shape()[2]);
        let mut out = vec![0.0; p * r];
        let (wd, vd) = (tw.data(), tv.data());
        for b in 0..p {
            let vrow = &vd[b * c..(b + 1) * c];
            for i in 0..r {
                let wrow = &wd[(b * r + i) * c..(b * r + i + 1) * c];
                out[b * r + i] = wrow.iter().zip(vrow).map(|(x, y)| x * y).sum();
            }
        }
        let out = Tensor::new([p, r], out)?;
        Ok(self.push(out, Op::Bmv(w, v), &[w, v]))
    }

    /// [`Graph::bmv`] with every row of every `w[p]` first divided by its L1
    /// norm. Same values as `bmv(l1_normalize(w, 2), v)` but the normalized
    /// weights are never stored; backward recomputes them from `w`.
    pub fn l1_bmv(&mut self, w: Var, v: Var, policy: DenomPolicy) -> Result<Var> {
        let (tw, tv) = (&self.values[w.0], &self.values[v.0]);
        if tw.ndim() != 3 || tv.ndim() != 2 || tw.shape()[0] != tv.shape()[0] || tw.shape()[2] != tv.shape()[1] {
            return Err(Error::shape("l1_bmv", tw.shape(), tv.shape()));
        }
        let (p, r, c) = (tw.shape()[0], tw.shape()[1], tw.shape()[2]);
        let mut out = vec![0.0; p * r];
        let mut denoms = vec![0.0; p * r];
        let (wd, vd) = (tw.data(), tv.data());
        for b in 0..p {
            let vrow = &vd[b * c..(b + 1) * c];
            for i in 0..r {
                let at = b * r + i;
                let wrow = &wd[at * c..(at + 1) * c];
                let mut s: f64 = wrow.iter().map(|x| x.abs()).sum();
                policy.apply(&mut s)?;
                denoms[at] = s;
                out[at] = wrow.iter().zip(vrow).map(|(x, y)| x / s * y).sum();
            }
        }
        let out = Tensor::new([p, r], out)?;
        Ok(self.push(out, Op::L1Bmv { w, v, denoms }, &[w, v]))
    }

    /// `[P, d]` to `[P, d, d]` with each row placed on a diagonal.
    pub fn diag_embed(&mut self, x: Var) -> Result<Var> {
        let t = &self.values[x.0];
        if t.ndim() != 2 {
            return Err(Error::invalid(format!(
                "diag_embed expects 2-D input, got {:?}",
                t.shape()
            )));
        }
        let (p, d) = (t.shape()[0], t.shape()[1]);
        let mut out = vec![0.0; p * d * d];
        for b in 0..p {
            for i in 0..d {
                out[(b * d + i) * d + i] = t.data()[b * d + i];
            }
        }
        let out = Tensor::new([p, d, d], out)?;
        Ok(self.push(out, Op::DiagEmbed(x), &[x]))
    }

    /// Mean binary cross-entropy of probabilities `pred` against 0/1 `labels`.
    /// Probabilities are clamped to `[1e-7, 1 - 1e-7]`.
    pub fn bce(&mut self, pred: Var, labels: &[f64]) -> Result<Var> {
        let t = &self.values[pred.0];
        if t.numel() != labels.len() {
            return Err(Error::shape("bce", t.shape(), &[labels.len()]));
        }
        if let Some(bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
            return Err(Error::invalid(format!("bce label {bad} is not 0 or 1")));
        }
        let n = labels.len().max(1) as f64;
        let loss = t
            .data()
            .iter()
            .zip(labels)
            .map(|(&o, &y)| {
                let o = o.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                -(y * o.ln() + (1.0 - y) * (1.0 - o).ln())
            })
            .sum::<f64>()
            / n;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                pred,
                labels: labels.to_vec(),
            },
            &[pred],
        ))
    }

    /// Reverse pass from a scalar `loss`. Each node is visited exactly once.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.values[loss.0].is_scalar() {
            return Err(Error::NonScalarLoss(self.values[loss.0].shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(gy) = grads[id].take() else { continue };
            if self.needs_grad[id] {
                self.backward_node(id, &gy, &mut grads);
            }
            grads[id] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, id: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let vals = &self.values;
        let out = &vals[id];
        match &self.ops[id] {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |g| axpy(g, 1.0, gy));
                self.acc(grads, *b, |g| axpy(g, 1.0, gy));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |g| axpy(g, 1.0, gy));
                self.acc(grads, *b, |g| axpy(g, -1.0, gy));
            }
            Op::Hadamard(a, b) => {
                let (da, db) = (vals[a.0].data(), vals[b.0].data());
                self.acc(grads, *a, |g| {
                    for ((g, u), y) in g.iter_mut().zip(gy).zip(db) {
                        *g += u * y;
                    }
                });
                self.acc(grads, *b, |g| {
                    for ((g, u), x) in g.iter_mut().zip(gy).zip(da) {
                        *g += u * x;
                    }
                });
            }
            Op::Scale(x, c) => self.acc(grads, *x, |g| axpy(g, *c, gy)),
            Op::AddBias(x, b) => {
                self.acc(grads, *x, |g| axpy(g, 1.0, gy));
                let width = vals[b.0].numel();
                self.acc(grads, *b, |g| {
                    for row in gy.chunks(width) {
                        axpy(g, 1.0, row);
                    }
                });
            }
            Op::ScaleRows(x, w) => {
                let width = vals[x.0].shape().last().copied().unwrap_or(1);
                let (dx, dw) = (vals[x.0].data(), vals[w.0].data());
                self.acc(grads, *x, |g| {
                    for ((grow, urow), &s) in g.chunks_mut(width).zip(gy.chunks(width)).zip(dw) {
                        axpy(grow, s, urow);
                    }
                });
                self.acc(grads, *w, |g| {
                    for ((gs, urow), xrow) in g.iter_mut().zip(gy.chunks(width)).zip(dx.chunks(width)) {
                        *gs += dot(urow, xrow);
                    }
                });
            }
            Op::Matmul(a, b) => {
                let (ta, tb) = (&vals[a.0], &vals[b.0]);
                let n = tb.shape()[0];
                let p = tb.shape()[1];
                let m = ta.numel() / n.max(1);
                let (ad, bd) = (ta.data(), tb.data());
                self.acc(grads, *a, |g| {
                    if n >= 8 {
                        // Row-times-transpose as axpys so the inner loop
                        // runs over contiguous memory.
                        let mut bt = vec![0.0; n * p];
                        for k in 0..n {
                            for j in 0..p {
                                bt[j * n + k] = bd[k * p + j];
                            }
                        }
                        for i in 0..m {
                            let grow = &mut g[i * n..(i + 1) * n];
                            for j in 0..p {
                                let u = gy[i * p + j];
                                if u != 0.0 {
                                    axpy(grow, u, &bt[j * n..(j + 1) * n]);
                                }
                            }
                        }
                    } else {
                        for i in 0..m {
                            let urow = &gy[i * p..(i + 1) * p];
                            for k in 0..n {
                                g[i * n + k] += dot(urow, &bd[k * p..(k + 1) * p]);
                            }
                        }
                    }
                });
                self.acc(grads, *b, |g| {
                    for i in 0..m {
                        let urow = &gy[i * p..(i + 1) * p];
                        for k in 0..n {
                            let aik = ad[i * n + k];
                            if aik != 0.0 {
                                axpy(&mut g[k * p..(k + 1) * p], aik, urow);
                            }
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let dx = vals[x.0].data();
                self.acc(grads, *x, |g| {
                    for ((g, u), &v) in g.iter_mut().zip(gy).zip(dx) {
                        if v > 0.0 {
                            *g += u;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let dy = out.data();
                self.acc(grads, *x, |g| {
                    for ((g, u), &y) in g.iter_mut().zip(gy).zip(dy) {
                        *g += u * y * (1.0 - y);
                    }
                });
            }
            Op::Sum(x) => self.acc(grads, *x, |g| g.iter_mut().for_each(|v| *v += gy[0])),
            Op::Mean(x) => {
                let n = vals[x.0].numel().max(1) as f64;
                self.acc(grads, *x, |g| g.iter_mut().for_each(|v| *v += gy[0] / n));
            }
            Op::SumAxis { x, axis } => {
                let (outer, len, inner) = axis_split(vals[x.0].shape(), *axis);
                self.acc(grads, *x, |g| {
                    for o in 0..outer {
                        let src = &gy[o * inner..(o + 1) * inner];
                        for j in 0..len {
                            axpy(&mut g[(o * len + j) * inner..(o * len + j + 1) * inner], 1.0, src);
                        }
                    }
                });
            }
            Op::Reshape(x) => self.acc(grads, *x, |g| axpy(g, 1.0, gy)),
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(out.shape(), *axis);
                let dy = out.data();
                self.acc(grads, *x, |g| {
                    let mut s = vec![0.0; inner];
                    for o in 0..outer {
                        let base = o * len * inner;
                        s.iter_mut().for_each(|v| *v = 0.0);
                        for j in 0..len {
                            let at = base + j * inner;
                            for i in 0..inner {
                                s[i] += gy[at + i] * dy[at + i];
                            }
                        }
                        for j in 0..len {
                            let at = base + j * inner;
                            for i in 0..inner {
                                g[at + i] += dy[at + i] * (gy[at + i] - s[i]);
                            }
                        }
                    }
                });
            }
            Op::L1Normalize { x, axis, denoms } => {
                let (outer, len, inner) = axis_split(out.shape(), *axis);
                let (dx, dy) = (vals[x.0].data(), out.data());
                self.acc(grads, *x, |g| {
                    let mut s = vec![0.0; inner];
                    for o in 0..outer {
                        let base = o * len * inner;
                        let den = &denoms[o * inner..(o + 1) * inner];
                        s.iter_mut().for_each(|v| *v = 0.0);
                        for j in 0..len {
                            let at = base + j * inner;
                            for i in 0..inner {
                                s[i] += gy[at + i] * dy[at + i];
                            }
                        }
                        for j in 0..len {
                            let at = base + j * inner;
                            for i in 0..inner {
                                g[at + i] += (gy[at + i] - sign(dx[at + i]) * s[i]) / den[i];
                            }
                        }
                    }
                });
            }
            Op::Gather { x, index } => {
                let width = vals[x.0].row_width();
                self.acc(grads, *x, |g| {
                    for (r, &src) in index.iter().enumerate() {
                        axpy(
                            &mut g[src * width..(src + 1) * width],
                            1.0,
                            &gy[r * width..(r + 1) * width],
                        );
                    }
                });
            }
            Op::Bmv(w, v) => {
                let tw = &vals[w.0];
                let (p, r, c) = (tw.shape()[0], tw.shape()[1], tw.shape()[2]);
                let (wd, vd) = (tw.data(), vals[v.0].data());
                self.acc(grads, *w, |g| {
                    for b in 0..p {
                        let vrow = &vd[b * c..(b + 1) * c];
                        for i in 0..r {
                            axpy(&mut g[(b * r + i) * c..(b * r + i + 1) * c], gy[b * r + i], vrow);
                        }
                    }
                });
                self.acc(grads, *v, |g| {
                    for b in 0..p {
                        let grow = &mut g[b * c..(b + 1) * c];
                        for i in 0..r {
                            axpy(grow, gy[b * r + i], &wd[(b * r + i) * c..(b * r + i + 1) * c]);
                        }
                    }
                });
            }
            Op::L1Bmv { w, v, denoms } => {
                let tw = &vals[w.0];
                let (p, r, c) = (tw.shape()[0], tw.shape()[1], tw.shape()[2]);
                let (wd, vd, yd) = (tw.data(), vals[v.0].data(), out.data());
                self.acc(grads, *w, |g| {
                    for b in 0..p {
                        let vrow = &vd[b * c..(b + 1) * c];
                        for i in 0..r {
                            let at = b * r + i;
                            let (s, y, u) = (denoms[at], yd[at], gy[at]);
                            let grow = &mut g[at * c..(at + 1) * c];
                            let wrow = &wd[at * c..(at + 1) * c];
                            for ((g, x), vv) in grow.iter_mut().zip(wrow).zip(vrow) {
                                *g += u * (vv - y * sign(*x)) / s;
                            }
                        }
                    }
                });
                self.acc(grads, *v, |g| {
                    for b in 0..p {
                        let grow = &mut g[b * c..(b + 1) * c];
                        for i in 0..r {
                            let at = b * r + i;
                            let f = gy[at] / denoms[at];
                            axpy(grow, f, &wd[at * c..(at + 1) * c]);
                        }
                    }
                });
            }
            Op::DiagEmbed(x) => {
                let t = &vals[x.0];
                let (p, d) = (t.shape()[0], t.shape()[1]);
                self.acc(grads, *x, |g| {
                    for b in 0..p {
                        for i in 0..d {
                            g[b * d + i] += gy[(b * d + i) * d + i];
                        }
                    }
                });
            }
            Op::Bce { pred, labels } => {
                let dp = vals[pred.0].data();
                let n = labels.len().max(1) as f64;
                self.acc(grads, *pred, |g| {
                    for ((g, &o), &y) in g.iter_mut().zip(dp).zip(labels) {
                        if o > BCE_CLAMP && o < 1.0 - BCE_CLAMP {
                            *g += gy[0] * -(y / o - (1.0 - y) / (1.0 - o)) / n;
                        }
                    }
                });
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.needs_grad[v.0] {
            return;
        }
        let len = self.values[v.0].numel();
        let g = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
        f(g);
    }
}

const BCE_CLAMP: f64 = 1e-7;

pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (y, x) in y.iter_mut().zip(x) {
        *y += a * x;
    }
}

/// Four interleaved partial sums, combined pairwise.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    (acc[0] + acc[2]) + (acc[1] + acc[3]) + tail
}
