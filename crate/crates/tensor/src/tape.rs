//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! Every op appends a node holding its output value and whatever it needs
//! for the vector-Jacobian product. `backward` walks the nodes in exact
//! reverse order of execution. Leaves that require gradients accumulate
//! into a persistent buffer, so calling `backward` twice without
//! [`Tape::zero_grad`] sums both passes.

use std::ops::Range;

use crate::error::{invalid, Result, TensorError};
use crate::kernels::{self, add_into, split_axis};
use crate::{Scalar, Tensor};

/// Default probability clamp applied by [`Tape::sigmoid`].
pub const SIGMOID_EPS: f64 = 1e-7;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Bmm(Var, Var),
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Repeat {
        input: Var,
        times: usize,
    },
    Gelu(Var),
    Relu(Var),
    Sigmoid {
        input: Var,
        lo: S,
        hi: S,
    },
    Log(Var),
    Pow(Var, S),
    Sum(Var),
    Mean(Var),
    MeanAxis {
        input: Var,
        axis: usize,
    },
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    Cosine(Var, Var),
    Neighborhood {
        input: Var,
    },
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
}

/// Ordered record of differentiable ops. Not shareable across threads while recording.
#[derive(Debug)]
pub struct Tape<S: Scalar = f64> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node and its saved intermediates. Outstanding `Var`s become invalid.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf; `None` before any backward pass
    /// reached it or for leaves that do not require gradients.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Registers a leaf; it is trainable iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<S>) -> Var {
        let requires_grad = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, tensor: Tensor<S>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor<S>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Tensor<S> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(ta.shape().to_vec(), data)
    }

    fn map(&self, a: Var, f: impl Fn(S) -> S) -> Tensor<S> {
        let ta = self.value(a);
        Tensor::from_parts(ta.shape().to_vec(), ta.data().iter().map(|&x| f(x)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let s = S::of(factor);
        let out = self.map(a, |x| x * s);
        self.push("scale", out, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, shift: f64) -> Result<Var> {
        let s = S::of(shift);
        let out = self.map(a, |x| x + s);
        self.push("add_scalar", out, Op::AddScalar(a), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(
            "matmul",
            Tensor::from_parts(vec![m, n], data),
            Op::MatMul(a, b),
            &[a, b],
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 {
            return Err(invalid("transpose", format!("expected a 2-D tensor, got {sa:?}")));
        }
        let out = transpose2(self.value(a).data(), sa[0], sa[1]);
        self.push(
            "transpose",
            Tensor::from_parts(vec![sa[1], sa[0]], out),
            Op::Transpose(a),
            &[a],
        )
    }

    /// Batched matrix product `[B×m×k] · [B×k×n] → [B×m×n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(TensorError::Shape {
                op: "bmm",
                lhs: sa,
                rhs: sb,
            });
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(bs * m * n);
        for i in 0..bs {
            out.extend(kernels::matmul(
                &da[i * m * k..(i + 1) * m * k],
                &db[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
            ));
        }
        self.push("bmm", Tensor::from_parts(vec![bs, m, n], out), Op::Bmm(a, b), &[a, b])
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(a).clone().with_requires_grad(false).reshape(shape)?;
        self.push("reshape", out, Op::Reshape(a), &[a])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| invalid("concat", "no inputs"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(invalid("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(TensorError::Shape {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(
            "concat",
            Tensor::from_parts(shape, data),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    pub fn slice(&mut self, a: Var, axis: usize, range: Range<usize>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || range.start > range.end || range.end > shape[axis] {
            return Err(TensorError::OutOfRange {
                op: "slice",
                axis,
                start: range.start,
                end: range.end,
                extent: shape.get(axis).copied().unwrap_or(0),
            });
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let width = range.len();
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = o * extent * inner;
            data.extend_from_slice(&src[base + range.start * inner..base + range.end * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = width;
        self.push(
            "slice",
            Tensor::from_parts(out_shape, data),
            Op::Slice {
                input: a,
                axis,
                start: range.start,
            },
            &[a],
        )
    }

    /// Stacks `times` copies of `a` along a new leading axis.
    pub fn repeat(&mut self, a: Var, times: usize) -> Result<Var> {
        let t = self.value(a);
        let mut shape = vec![times];
        shape.extend_from_slice(t.shape());
        let mut data = Vec::with_capacity(times * t.numel());
        for _ in 0..times {
            data.extend_from_slice(t.data());
        }
        self.push(
            "repeat",
            Tensor::from_parts(shape, data),
            Op::Repeat { input: a, times },
            &[a],
        )
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, |x| kernels::gelu(x).0);
        self.push("gelu", out, Op::Gelu(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, |x| x.max(S::zero()));
        self.push("relu", out, Op::Relu(a), &[a])
    }

    /// Logistic sigmoid clamped to `[SIGMOID_EPS, 1 - SIGMOID_EPS]`.
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.sigmoid_clamped(a, SIGMOID_EPS)
    }

    /// Logistic sigmoid clamped to `[eps, 1 - eps]`; clamped cells pass no gradient.
    pub fn sigmoid_clamped(&mut self, a: Var, eps: f64) -> Result<Var> {
        if !(0.0..0.5).contains(&eps) {
            return Err(invalid("sigmoid", format!("clamp eps {eps} outside [0, 0.5)")));
        }
        let (lo, hi) = (S::of(eps), S::one() - S::of(eps));
        let out = self.map(a, |x| sigmoid(x).max(lo).min(hi));
        self.push("sigmoid", out, Op::Sigmoid { input: a, lo, hi }, &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, |x| x.ln());
        self.push("log", out, Op::Log(a), &[a])
    }

    pub fn pow(&mut self, a: Var, exponent: f64) -> Result<Var> {
        let e = S::of(exponent);
        let out = self.map(a, |x| x.powf(e));
        self.push("pow", out, Op::Pow(a, e), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: S = self.value(a).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(invalid("mean", "empty tensor"));
        }
        let s: S = t.data().iter().copied().sum::<S>() / S::of(t.numel() as f64);
        self.push("mean", Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Mean over `axis`, removing it from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(invalid("mean_axis", format!("axis {axis} invalid for {shape:?}")));
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let inv = S::one() / S::of(extent as f64);
        let mut data = vec![S::zero(); outer * inner];
        for o in 0..outer {
            let acc = &mut data[o * inner..(o + 1) * inner];
            for e in 0..extent {
                let base = (o * extent + e) * inner;
                add_into(acc, &src[base..base + inner]);
            }
            for x in acc.iter_mut() {
                *x = *x * inv;
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        self.push(
            "mean_axis",
            Tensor::from_parts(out_shape, data),
            Op::MeanAxis { input: a, axis },
            &[a],
        )
    }

    /// Softmax over the last dimension with per-row max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let n = *t
            .shape()
            .last()
            .ok_or_else(|| invalid("softmax_rows", "scalar input"))?;
        if !t.is_finite() {
            return Err(TensorError::NonFinite { op: "softmax_rows" });
        }
        let mut data = t.data().to_vec();
        if n > 0 {
            for row in data.chunks_mut(n) {
                let max = row.iter().copied().fold(S::neg_infinity(), S::max);
                let mut z = S::zero();
                for x in row.iter_mut() {
                    *x = (*x - max).exp();
                    z = z + *x;
                }
                for x in row.iter_mut() {
                    *x = *x / z;
                }
            }
        }
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        self.push("softmax_rows", out, Op::SoftmaxRows(a), &[a])
    }

    /// Layer normalization over the last dimension (population variance).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| invalid("layer_norm", "scalar input"))?;
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(TensorError::Shape {
                    op: "layer_norm",
                    lhs: shape,
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        if !(eps > 0.0) {
            return Err(invalid("layer_norm", format!("eps must be positive, got {eps}")));
        }
        let eps = S::of(eps);
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = src.len() / d.max(1);
        let mut xhat = Vec::with_capacity(src.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(src.len());
        let inv_d = S::one() / S::of(d as f64);
        for row in src.chunks(d) {
            let mean = row.iter().copied().sum::<S>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_d;
            let r = S::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        self.push(
            "layer_norm",
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    /// Cosine similarity over the last dimension; the output drops that dimension.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cosine_similarity", a, b)?;
        let shape = self.shape(a).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| invalid("cosine_similarity", "scalar input"))?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(da.len() / d.max(1));
        for (ra, rb) in da.chunks(d).zip(db.chunks(d)) {
            let (dot, na, nb) = dot_norms(ra, rb);
            if na == S::zero() || nb == S::zero() {
                return Err(invalid("cosine_similarity", "zero-norm vector"));
            }
            out.push(dot / (na * nb));
        }
        let out_shape = shape[..shape.len() - 1].to_vec();
        self.push(
            "cosine_similarity",
            Tensor::from_parts(out_shape, out),
            Op::Cosine(a, b),
            &[a, b],
        )
    }

    /// 3×3 zero-padded neighbourhood gather: `[B×h×w×c] → [B·h·w × 9c]`,
    /// columns ordered by (dy, dx, channel). Followed by a matmul this is a
    /// 3×3 convolution.
    pub fn neighborhood3x3(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 4 {
            return Err(invalid("neighborhood3x3", format!("expected [B,h,w,c], got {shape:?}")));
        }
        let (bs, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
        let src = self.value(a).data();
        let mut data = vec![S::zero(); bs * h * w * 9 * c];
        for_each_neighbor(bs, h, w, c, |dst, s| data[dst..dst + c].copy_from_slice(&src[s..s + c]));
        self.push(
            "neighborhood3x3",
            Tensor::from_parts(vec![bs * h * w, 9 * c], data),
            Op::Neighborhood { input: a },
            &[a],
        )
    }

    /// Back-propagates from a single-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let ls = self.value(loss);
        if ls.numel() != 1 {
            return Err(TensorError::NotScalar(ls.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<S>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => add_into(acc, &g),
                    None => node.grad = Some(g),
                }
                continue;
            }
            for (v, contribution) in self.vjp(i, &g) {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => add_into(acc, &contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        Ok(())
    }

    fn data(&self, v: Var) -> &[S] {
        self.nodes[v.0].value.data()
    }

    fn vjp(&self, i: usize, g: &[S]) -> Vec<(Var, Vec<S>)> {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|&x| -x).collect())],
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                vec![
                    (*a, g.iter().zip(db).map(|(&x, &y)| x * y).collect()),
                    (*b, g.iter().zip(da).map(|(&x, &y)| x * y).collect()),
                ]
            }
            Op::Scale(a, s) => vec![(*a, g.iter().map(|&x| x * *s).collect())],
            Op::AddScalar(a) => vec![(*a, g.to_vec())],
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let mut res = Vec::with_capacity(2);
                if self.nodes[a.0].requires_grad {
                    res.push((*a, kernels::matmul_nt(g, self.data(*b), m, k, n)));
                }
                if self.nodes[b.0].requires_grad {
                    res.push((*b, kernels::matmul_tn(self.data(*a), g, m, k, n)));
                }
                res
            }
            Op::Transpose(a) => {
                let s = node.value.shape();
                vec![(*a, transpose2(g, s[0], s[1]))]
            }
            Op::Bmm(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (da, db) = (self.data(*a), self.data(*b));
                let mut ga = Vec::with_capacity(bs * m * k);
                let mut gb = Vec::with_capacity(bs * k * n);
                for j in 0..bs {
                    let gj = &g[j * m * n..(j + 1) * m * n];
                    ga.extend(kernels::matmul_nt(gj, &db[j * k * n..(j + 1) * k * n], m, k, n));
                    gb.extend(kernels::matmul_tn(&da[j * m * k..(j + 1) * m * k], gj, m, k, n));
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Reshape(a) => vec![(*a, g.to_vec())],
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = split_axis(node.value.shape(), *axis);
                let mut parts: Vec<Vec<S>> = inputs
                    .iter()
                    .map(|v| Vec::with_capacity(self.value(*v).numel()))
                    .collect();
                let mut offset = 0;
                for _ in 0..outer {
                    for (p, v) in parts.iter_mut().zip(inputs) {
                        let chunk = self.shape(*v)[*axis] * inner;
                        p.extend_from_slice(&g[offset..offset + chunk]);
                        offset += chunk;
                    }
                }
                inputs.iter().copied().zip(parts).collect()
            }
            Op::Slice { input, axis, start } => {
                let in_shape = self.shape(*input);
                let (outer, extent, inner) = split_axis(in_shape, *axis);
                let width = node.value.shape()[*axis];
                let mut full = vec![S::zero(); outer * extent * inner];
                for o in 0..outer {
                    let dst = o * extent * inner + start * inner;
                    let src = o * width * inner;
                    full[dst..dst + width * inner].copy_from_slice(&g[src..src + width * inner]);
                }
                vec![(*input, full)]
            }
            Op::Repeat { input, times } => {
                let n = self.value(*input).numel();
                let mut acc = vec![S::zero(); n];
                for r in 0..*times {
                    add_into(&mut acc, &g[r * n..(r + 1) * n]);
                }
                vec![(*input, acc)]
            }
            Op::Gelu(a) => {
                let da = self.data(*a);
                vec![(*a, g.iter().zip(da).map(|(&gi, &x)| gi * kernels::gelu(x).1).collect())]
            }
            Op::Relu(a) => {
                let da = self.data(*a);
                vec![(
                    *a,
                    g.iter()
                        .zip(da)
                        .map(|(&gi, &x)| if x > S::zero() { gi } else { S::zero() })
                        .collect(),
                )]
            }
            Op::Sigmoid { input, lo, hi } => vec![(
                *input,
                g.iter()
                    .zip(out)
                    .map(|(&gi, &y)| {
                        if y <= *lo || y >= *hi {
                            S::zero()
                        } else {
                            gi * y * (S::one() - y)
                        }
                    })
                    .collect(),
            )],
            Op::Log(a) => {
                let da = self.data(*a);
                vec![(*a, g.iter().zip(da).map(|(&gi, &x)| gi / x).collect())]
            }
            Op::Pow(a, e) => {
                let da = self.data(*a);
                let e = *e;
                vec![(
                    *a,
                    g.iter()
                        .zip(da)
                        .map(|(&gi, &x)| {
                            if e == S::zero() {
                                S::zero()
                            } else {
                                gi * e * x.powf(e - S::one())
                            }
                        })
                        .collect(),
                )]
            }
            Op::Sum(a) => vec![(*a, vec![g[0]; self.value(*a).numel()])],
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                vec![(*a, vec![g[0] / S::of(n as f64); n])]
            }
            Op::MeanAxis { input, axis } => {
                let (outer, extent, inner) = split_axis(self.shape(*input), *axis);
                let inv = S::one() / S::of(extent as f64);
                let mut full = Vec::with_capacity(outer * extent * inner);
                for o in 0..outer {
                    let gs = &g[o * inner..(o + 1) * inner];
                    for _ in 0..extent {
                        full.extend(gs.iter().map(|&x| x * inv));
                    }
                }
                vec![(*input, full)]
            }
            Op::SoftmaxRows(a) => {
                let n = *node.value.shape().last().unwrap_or(&1);
                let mut dx = Vec::with_capacity(out.len());
                for (y, gy) in out.chunks(n).zip(g.chunks(n)) {
                    let dot: S = y.iter().zip(gy).map(|(&p, &q)| p * q).sum();
                    dx.extend(y.iter().zip(gy).map(|(&p, &q)| p * (q - dot)));
                }
                vec![(*a, dx)]
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.value(*gain).numel();
                let gv = self.data(*gain);
                let mut dgain = vec![S::zero(); d];
                let mut dbias = vec![S::zero(); d];
                let mut dx = Vec::with_capacity(g.len());
                let inv_d = S::one() / S::of(d as f64);
                for ((gr, hr), &r) in g.chunks(d).zip(xhat.chunks(d)).zip(rstd) {
                    let mut mean_dh = S::zero();
                    let mut mean_dh_h = S::zero();
                    for j in 0..d {
                        dgain[j] = dgain[j] + gr[j] * hr[j];
                        dbias[j] = dbias[j] + gr[j];
                        let dh = gr[j] * gv[j];
                        mean_dh = mean_dh + dh;
                        mean_dh_h = mean_dh_h + dh * hr[j];
                    }
                    mean_dh = mean_dh * inv_d;
                    mean_dh_h = mean_dh_h * inv_d;
                    for j in 0..d {
                        let dh = gr[j] * gv[j];
                        dx.push(r * (dh - mean_dh - hr[j] * mean_dh_h));
                    }
                }
                vec![(*x, dx), (*gain, dgain), (*bias, dbias)]
            }
            Op::Cosine(a, b) => {
                let d = *self.shape(*a).last().unwrap_or(&1);
                let (da, db) = (self.data(*a), self.data(*b));
                let mut ga = Vec::with_capacity(da.len());
                let mut gb = Vec::with_capacity(db.len());
                for ((ra, rb), (&gi, &c)) in da.chunks(d).zip(db.chunks(d)).zip(g.iter().zip(out)) {
                    let (_, na, nb) = dot_norms(ra, rb);
                    let nab = na * nb;
                    for j in 0..d {
                        ga.push(gi * (rb[j] / nab - c * ra[j] / (na * na)));
                        gb.push(gi * (ra[j] / nab - c * rb[j] / (nb * nb)));
                    }
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Neighborhood { input } => {
                let s = self.shape(*input);
                let (bs, h, w, c) = (s[0], s[1], s[2], s[3]);
                let mut dx = vec![S::zero(); bs * h * w * c];
                for_each_neighbor(bs, h, w, c, |dst, src| {
                    add_into(&mut dx[src..src + c], &g[dst..dst + c])
                });
                vec![(*input, dx)]
            }
        }
    }
}

pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

fn dot_norms<S: Scalar>(a: &[S], b: &[S]) -> (S, S, S) {
    let mut dot = S::zero();
    let mut na = S::zero();
    let mut nb = S::zero();
    for (&x, &y) in a.iter().zip(b) {
        dot = dot + x * y;
        na = na + x * x;
        nb = nb + y * y;
    }
    (dot, na.sqrt(), nb.sqrt())
}

fn transpose2<S: Scalar>(src: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); src.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = src[i * cols + j];
        }
    }
    out
}

/// Calls `f(dst_offset, src_offset)` for every in-bounds (cell, neighbour) pair.
fn for_each_neighbor(bs: usize, h: usize, w: usize, c: usize, mut f: impl FnMut(usize, usize)) {
    for b in 0..bs {
        for y in 0..h {
            for x in 0..w {
                let row = ((b * h + y) * w + x) * 9 * c;
                for dy in 0..3 {
                    let Some(yy) = (y + dy).checked_sub(1).filter(|&v| v < h) else {
                        continue;
                    };
                    for dx in 0..3 {
                        let Some(xx) = (x + dx).checked_sub(1).filter(|&v| v < w) else {
                            continue;
                        };
                        f(row + (dy * 3 + dx) * c, ((b * h + yy) * w + xx) * c);
                    }
                }
            }
        }
    }
}
