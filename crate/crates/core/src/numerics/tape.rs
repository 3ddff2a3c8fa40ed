//! Define-by-run reverse-mode differentiation.
//!
//! Every primitive evaluates eagerly and appends a node to the [`Tape`].
//! [`Tape::backward`] walks the nodes in reverse creation order and applies
//! each node's backward rule once, so every leaf marked `requires_grad`
//! receives exactly one accumulated gradient.

use matrixmultiply::dgemm;

use super::tensor::{axis_split, strides, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Sum(Var),
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    MatMul(Var, Var),
    Conv1d { x: Var, w: Var, b: Var, dilation: usize },
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(..) => "relu",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sqrt(..) => "sqrt",
            Op::Square(..) => "square",
            Op::Clamp { .. } => "clamp",
            Op::Sum(..) => "sum",
            Op::Reshape(..) => "reshape",
            Op::Permute { .. } => "permute",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::MatMul(..) => "matmul",
            Op::Conv1d { .. } => "conv1d",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    label: Option<String>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
}

/// Ordered record of primitive operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_node(value, Op::Leaf, requires_grad, None)
    }

    pub fn param(&mut self, value: Tensor, name: &str) -> Var {
        self.push_node(value, Op::Leaf, true, Some(name.to_string()))
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// First recorded node holding a NaN or infinity, described for diagnostics.
    pub fn first_non_finite(&self) -> Option<String> {
        self.nodes.iter().enumerate().find_map(|(i, node)| {
            if node.value.is_finite() {
                return None;
            }
            let what = match &node.label {
                Some(label) => format!("{} '{label}'", node.op.name()),
                None => node.op.name().to_string(),
            };
            Some(format!("node #{i} ({what}) shape {:?}", node.value.shape()))
        })
    }

    fn push_node(&mut self, value: Tensor, op: Op, requires_grad: bool, label: Option<String>) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            label,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: &[usize], data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let value = Tensor::new(shape, data).expect("primitive produced inconsistent shape");
        self.push_node(value, op, requires_grad, None)
    }

    // ---------------------------------------------------------------- elementwise

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out_shape = broadcast_shape(name, ta.shape(), tb.shape())?;
        let data = if ta.shape() == tb.shape() {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut data = vec![0.0; out_shape.iter().product()];
            let (da, db) = (ta.data(), tb.data());
            for_each_broadcast(&out_shape, ta.shape(), tb.shape(), |o, ia, ib| {
                data[o] = f(da[ia], db[ib]);
            });
            data
        };
        Ok(self.push(&out_shape, data, op, &[a, b]))
    }

    /// Elementwise sum; either operand may broadcast along size-1 axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        let data = t.data().iter().map(|&v| f(v)).collect();
        self.push(&shape, data, op, &[x])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.unary(x, Op::Scale(x, factor), |v| v * factor)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v < 0.0 { 0.0 } else { v })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), f64::ln)
    }

    /// Square root; callers clamp the argument away from zero first.
    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sqrt(x), f64::sqrt)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Op::Clamp { x, lo, hi }, |v| v.clamp(lo, hi))
    }

    pub fn clamp_min(&mut self, x: Var, lo: f64) -> Var {
        self.clamp(x, lo, f64::INFINITY)
    }

    // ---------------------------------------------------------------- reductions

    /// Sums over `axes`, keeping them as size-1 dimensions.
    pub fn sum_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut out_shape = shape.clone();
        for &axis in axes {
            if axis >= shape.len() {
                return Err(Error::dim("sum", axis, format!("< {}", shape.len()), axis));
            }
            out_shape[axis] = 1;
        }
        let mut data = vec![0.0; out_shape.iter().product()];
        let src = self.value(x).data();
        for_each_broadcast(&shape, &shape, &out_shape, |i, _, o| {
            data[o] += src[i];
        });
        Ok(self.push(&out_shape, data, Op::Sum(x), &[x]))
    }

    pub fn mean_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x);
        let count: usize = axes.iter().filter_map(|&a| shape.get(a)).product();
        let s = self.sum_axes(x, axes)?;
        Ok(self.scale(s, 1.0 / count as f64))
    }

    /// Sum of every element, as a `[1]` tensor.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        let s = self.sum_axes(x, &axes).expect("all axes are in range");
        self.reshape(s, &[1]).expect("single element")
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Mean over the last (time) axis, dropping it: `[.., C, T] -> [.., C]`.
    pub fn mean_over_time(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let last = shape.len() - 1;
        let m = self.mean_axes(x, &[last])?;
        let kept = if last == 0 { vec![1] } else { shape[..last].to_vec() };
        self.reshape(m, &kept)
    }

    // ---------------------------------------------------------------- shape

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let requires_grad = self.nodes[x.0].requires_grad;
        Ok(self.push_node(t, Op::Reshape(x), requires_grad, None))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim("permute", "perm", format!("permutation of {}", shape.len()), format!("{perm:?}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let in_strides = strides(&shape);
        let permuted: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(src.len());
        for_each_strided(&out_shape, &permuted, |i| data.push(src[i]));
        Ok(self.push(&out_shape, data, Op::Permute { x, perm: perm.to_vec() }, &[x]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::dim("transpose", "rank", ">= 2", r));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::dim("concat", "parts", ">= 1", 0))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::dim("concat", axis, format!("< {}", first.len()), axis));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() {
                return Err(Error::dim("concat", "rank", first.len(), s.len()));
            }
            for (ax, (&d0, &d)) in first.iter().zip(s).enumerate() {
                if ax != axis && d0 != d {
                    return Err(Error::dim("concat", ax, d0, d));
                }
            }
            total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = axis_split(&out_shape, axis);
        let mut data = vec![0.0; out_shape.iter().product()];
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            let len = t.shape()[axis];
            let src = t.data();
            for o in 0..outer {
                let dst = (o * total + offset) * inner;
                data[dst..dst + len * inner].copy_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
            offset += len;
        }
        Ok(self.push(&out_shape, data, Op::Concat { parts: parts.to_vec(), axis }, parts))
    }

    /// Concatenates along the channel axis, which is the second-to-last axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::dim("concat_channels", "rank", ">= 2", r));
        }
        self.concat(&[a, b], r - 2)
    }

    /// Contiguous range `start..start + len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::dim(
                "slice",
                axis,
                format!("range within {shape:?}"),
                format!("{start}..{}", start + len),
            ));
        }
        let (outer, full, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let begin = (o * full + start) * inner;
            data.extend_from_slice(&src[begin..begin + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.push(&out_shape, data, Op::Slice { x, axis, start }, &[x]))
    }

    // ---------------------------------------------------------------- contractions

    /// Matrix product over the last two axes.
    ///
    /// `a` is `[.., m, k]`; `b` is either a shared `[k, n]` matrix or carries
    /// the same leading batch axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let dims = matmul_dims(self.shape(a), self.shape(b))?;
        let MatDims { batch, m, k, n, shared_b } = dims;
        let mut out_shape = self.shape(a).to_vec();
        *out_shape.last_mut().unwrap() = n;
        let mut data = vec![0.0; batch * m * n];
        let (ta, tb) = (self.value(a).data(), self.value(b).data());
        for bi in 0..batch {
            let boff = if shared_b { 0 } else { bi * k * n };
            gemm(
                m,
                k,
                n,
                &ta[bi * m * k..],
                (k, 1),
                &tb[boff..],
                (n, 1),
                &mut data[bi * m * n..],
                false,
            );
        }
        Ok(self.push(&out_shape, data, Op::MatMul(a, b), &[a, b]))
    }

    /// Same-padded dilated 1-D convolution over `[B, C_in, T]`.
    ///
    /// `w` is `[C_out, C_in, k]` with odd `k`; `bias` is `[C_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, bias: Var, dilation: usize) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(bias));
        if xs.len() != 3 {
            return Err(Error::dim("conv1d", "input rank", 3, xs.len()));
        }
        if ws.len() != 3 {
            return Err(Error::dim("conv1d", "kernel rank", 3, ws.len()));
        }
        let (batch, c_in, t) = (xs[0], xs[1], xs[2]);
        let (c_out, w_in, k) = (ws[0], ws[1], ws[2]);
        if w_in != c_in {
            return Err(Error::dim("conv1d", "in_channels", c_in, w_in));
        }
        if k % 2 == 0 {
            return Err(Error::dim("conv1d", "kernel", "odd size", k));
        }
        if dilation == 0 {
            return Err(Error::dim("conv1d", "dilation", ">= 1", 0));
        }
        if bs != [c_out] {
            return Err(Error::dim("conv1d", "out_channels", c_out, format!("{bs:?}")));
        }
        let geom = ConvGeom { c_in, t, k, dilation };
        let mut cols = vec![0.0; c_in * k * t];
        let mut data = vec![0.0; batch * c_out * t];
        let (tx, tw, tb) = (self.value(x).data(), self.value(w).data(), self.value(bias).data());
        for bi in 0..batch {
            geom.im2col(&tx[bi * c_in * t..(bi + 1) * c_in * t], &mut cols);
            let out = &mut data[bi * c_out * t..(bi + 1) * c_out * t];
            for (co, row) in out.chunks_mut(t).enumerate() {
                row.fill(tb[co]);
            }
            gemm(c_out, c_in * k, t, tw, (c_in * k, 1), &cols, (t, 1), out, true);
        }
        Ok(self.push(&[batch, c_out, t], data, Op::Conv1d { x, w, b: bias, dilation }, &[x, w, bias]))
    }

    // ---------------------------------------------------------------- softmax

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("softmax", axis, format!("< {}", shape.len()), axis));
        }
        let data = softmax_along(self.value(x).data(), &shape, axis);
        Ok(self.push(&shape, data, Op::Softmax { x, axis }, &[x]))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("log_softmax", axis, format!("< {}", shape.len()), axis));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| src[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..len).map(|j| (src[idx(j)] - max).exp()).sum::<f64>().ln();
                for j in 0..len {
                    data[idx(j)] = src[idx(j)] - lse;
                }
            }
        }
        Ok(self.push(&shape, data, Op::LogSoftmax { x, axis }, &[x]))
    }

    // ---------------------------------------------------------------- backward

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::dim("backward", "loss", "1 element", self.value(loss).numel()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[idx] = Some(g);
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
        }
        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (&node.op, node.requires_grad) {
                (Op::Leaf, true) => Some(match g {
                    Some(g) => Tensor::new(node.value.shape(), g).expect("gradient shape"),
                    None => Tensor::zeros(node.value.shape()),
                }),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let out_shape = node.value.shape();
                if self.requires_grad(*a) {
                    let ga = reduce_to(g, out_shape, self.shape(*a));
                    self.accumulate(grads, *a, ga.iter().copied());
                }
                if self.requires_grad(*b) {
                    let gb = reduce_to(g, out_shape, self.shape(*b));
                    self.accumulate(grads, *b, gb.iter().map(|v| sign * v));
                }
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let div = matches!(node.op, Op::Div(..));
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (da, db) = (ta.data(), tb.data());
                let mut ga = vec![0.0; da.len()];
                let mut gb = vec![0.0; db.len()];
                for_each_broadcast(node.value.shape(), ta.shape(), tb.shape(), |o, ia, ib| {
                    if div {
                        ga[ia] += g[o] / db[ib];
                        gb[ib] -= g[o] * da[ia] / (db[ib] * db[ib]);
                    } else {
                        ga[ia] += g[o] * db[ib];
                        gb[ib] += g[o] * da[ia];
                    }
                });
                self.accumulate(grads, *a, ga.into_iter());
                self.accumulate(grads, *b, gb.into_iter());
            }
            Op::Scale(x, f) => self.accumulate(grads, *x, g.iter().map(|v| v * f)),
            Op::AddScalar(x) | Op::Reshape(x) => self.accumulate(grads, *x, g.iter().copied()),
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, g.iter().zip(xv).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }));
            }
            Op::Tanh(x) => self.accumulate(grads, *x, g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y))),
            Op::Sigmoid(x) => self.accumulate(grads, *x, g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y))),
            Op::Exp(x) => self.accumulate(grads, *x, g.iter().zip(y).map(|(g, y)| g * y)),
            Op::Log(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, g.iter().zip(xv).map(|(g, v)| g / v));
            }
            Op::Sqrt(x) => self.accumulate(grads, *x, g.iter().zip(y).map(|(g, y)| g * 0.5 / y)),
            Op::Square(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, g.iter().zip(xv).map(|(g, v)| 2.0 * g * v));
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x).data();
                self.accumulate(
                    grads,
                    *x,
                    g.iter().zip(xv).map(|(g, &v)| if v > *lo && v < *hi { *g } else { 0.0 }),
                );
            }
            Op::Sum(x) => {
                let shape = self.shape(*x);
                let mut gx = vec![0.0; self.value(*x).numel()];
                for_each_broadcast(shape, shape, node.value.shape(), |i, _, o| gx[i] = g[o]);
                self.accumulate(grads, *x, gx.into_iter());
            }
            Op::Permute { x, perm } => {
                let in_strides = strides(self.shape(*x));
                let permuted: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
                let mut gx = vec![0.0; g.len()];
                let mut o = 0;
                for_each_strided(node.value.shape(), &permuted, |i| {
                    gx[i] = g[o];
                    o += 1;
                });
                self.accumulate(grads, *x, gx.into_iter());
            }
            Op::Concat { parts, axis } => {
                let out_shape = node.value.shape();
                let (outer, total, inner) = axis_split(out_shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if self.requires_grad(p) {
                        let mut gp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let begin = (o * total + offset) * inner;
                            gp.extend_from_slice(&g[begin..begin + len * inner]);
                        }
                        self.accumulate(grads, p, gp.into_iter());
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, full, inner) = axis_split(self.shape(*x), *axis);
                let len = node.value.shape()[*axis];
                let mut gx = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    let begin = (o * full + start) * inner;
                    gx[begin..begin + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *x, gx.into_iter());
            }
            Op::MatMul(a, b) => self.backprop_matmul(*a, *b, g, grads),
            Op::Conv1d { x, w, b, dilation } => self.backprop_conv1d(*x, *w, *b, *dilation, g, grads),
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                let mut gx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..len {
                            gx[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, gx.into_iter());
            }
            Op::LogSoftmax { x, axis } => {
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                let mut gx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let total: f64 = (0..len).map(|j| g[idx(j)]).sum();
                        for j in 0..len {
                            gx[idx(j)] = g[idx(j)] - y[idx(j)].exp() * total;
                        }
                    }
                }
                self.accumulate(grads, *x, gx.into_iter());
            }
        }
    }

    fn backprop_matmul(&self, a: Var, b: Var, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let MatDims { batch, m, k, n, shared_b } =
            matmul_dims(self.shape(a), self.shape(b)).expect("checked in forward");
        let (ta, tb) = (self.value(a).data(), self.value(b).data());
        if self.requires_grad(a) {
            let mut ga = vec![0.0; batch * m * k];
            for bi in 0..batch {
                let boff = if shared_b { 0 } else { bi * k * n };
                // dA = dC · Bᵀ
                gemm(m, n, k, &g[bi * m * n..], (n, 1), &tb[boff..], (1, n), &mut ga[bi * m * k..], false);
            }
            self.accumulate(grads, a, ga.into_iter());
        }
        if self.requires_grad(b) {
            let mut gb = vec![0.0; if shared_b { k * n } else { batch * k * n }];
            for bi in 0..batch {
                let boff = if shared_b { 0 } else { bi * k * n };
                // dB = Aᵀ · dC
                gemm(k, m, n, &ta[bi * m * k..], (1, k), &g[bi * m * n..], (n, 1), &mut gb[boff..], true);
            }
            self.accumulate(grads, b, gb.into_iter());
        }
    }

    fn backprop_conv1d(&self, x: Var, w: Var, b: Var, dilation: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let xs = self.shape(x);
        let (batch, c_in, t) = (xs[0], xs[1], xs[2]);
        let ws = self.shape(w);
        let (c_out, k) = (ws[0], ws[2]);
        let geom = ConvGeom { c_in, t, k, dilation };
        let (tx, tw) = (self.value(x).data(), self.value(w).data());
        if self.requires_grad(b) {
            let mut gb = vec![0.0; c_out];
            for bi in 0..batch {
                for (co, gbc) in gb.iter_mut().enumerate() {
                    let off = (bi * c_out + co) * t;
                    *gbc += g[off..off + t].iter().sum::<f64>();
                }
            }
            self.accumulate(grads, b, gb.into_iter());
        }
        let mut cols = vec![0.0; c_in * k * t];
        if self.requires_grad(w) {
            let mut gw = vec![0.0; c_out * c_in * k];
            for bi in 0..batch {
                geom.im2col(&tx[bi * c_in * t..(bi + 1) * c_in * t], &mut cols);
                gemm(c_out, t, c_in * k, &g[bi * c_out * t..], (t, 1), &cols, (1, t), &mut gw, true);
            }
            self.accumulate(grads, w, gw.into_iter());
        }
        if self.requires_grad(x) {
            let mut gx = vec![0.0; batch * c_in * t];
            for bi in 0..batch {
                cols.fill(0.0);
                gemm(c_in * k, c_out, t, tw, (1, c_in * k), &g[bi * c_out * t..], (t, 1), &mut cols, false);
                geom.col2im_add(&cols, &mut gx[bi * c_in * t..(bi + 1) * c_in * t]);
            }
            self.accumulate(grads, x, gx.into_iter());
        }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], var: Var, g: impl Iterator<Item = f64>) {
        if !self.requires_grad(var) {
            return;
        }
        match &mut grads[var.0] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, v)| *a += v),
            slot @ None => *slot = Some(g.collect()),
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax of a flat buffer along `axis` of `shape`.
pub(crate) fn softmax_along(src: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut data = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let max = (0..len).map(|j| src[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..len {
                let e = (src[idx(j)] - max).exp();
                data[idx(j)] = e;
                total += e;
            }
            for j in 0..len {
                data[idx(j)] /= total;
            }
        }
    }
    data
}

struct MatDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_b: bool,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatDims> {
    if a.len() < 2 {
        return Err(Error::dim("matmul", "lhs rank", ">= 2", a.len()));
    }
    if b.len() != 2 && b.len() != a.len() {
        return Err(Error::dim("matmul", "rhs rank", format!("2 or {}", a.len()), b.len()));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (kb, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != kb {
        return Err(Error::dim("matmul", "inner", k, kb));
    }
    let shared_b = b.len() == 2;
    if !shared_b && a[..a.len() - 2] != b[..b.len() - 2] {
        return Err(Error::dim(
            "matmul",
            "batch",
            format!("{:?}", &a[..a.len() - 2]),
            format!("{:?}", &b[..b.len() - 2]),
        ));
    }
    let batch = a[..a.len() - 2].iter().product();
    Ok(MatDims { batch, m, k, n, shared_b })
}

/// `c (+)= a · b` for an `m×k` by `k×n` product; strides are (row, col).
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(m == 0 || k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(k == 0 || n == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every offset dgemm touches.
    unsafe {
        dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct ConvGeom {
    c_in: usize,
    t: usize,
    k: usize,
    dilation: usize,
}

impl ConvGeom {
    fn pad(&self) -> usize {
        (self.k - 1) * self.dilation / 2
    }

    /// Fills `cols[(ci * k + j) * t + s] = x[ci, s + j·d − pad]` (zero outside).
    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let (t, pad) = (self.t, self.pad() as isize);
        for ci in 0..self.c_in {
            let src = &x[ci * t..(ci + 1) * t];
            for j in 0..self.k {
                let row = &mut cols[(ci * self.k + j) * t..(ci * self.k + j + 1) * t];
                let shift = (j * self.dilation) as isize - pad;
                for (s, out) in row.iter_mut().enumerate() {
                    let src_t = s as isize + shift;
                    *out = if src_t >= 0 && (src_t as usize) < t { src[src_t as usize] } else { 0.0 };
                }
            }
        }
    }

    fn col2im_add(&self, cols: &[f64], x: &mut [f64]) {
        let (t, pad) = (self.t, self.pad() as isize);
        for ci in 0..self.c_in {
            for j in 0..self.k {
                let row = &cols[(ci * self.k + j) * t..(ci * self.k + j + 1) * t];
                let shift = (j * self.dilation) as isize - pad;
                for (s, &v) in row.iter().enumerate() {
                    let src_t = s as isize + shift;
                    if src_t >= 0 && (src_t as usize) < t {
                        x[ci * t + src_t as usize] += v;
                    }
                }
            }
        }
    }
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::dim(op, "rank", a.len(), b.len()));
    }
    a.iter()
        .zip(b)
        .enumerate()
        .map(|(axis, (&x, &y))| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::dim(op, axis, x, y)),
        })
        .collect()
}

/// Visits every index of `out_shape` with the matching flat offsets into
/// operands of shape `a` and `b`, each broadcasting along its size-1 axes.
fn for_each_broadcast(out_shape: &[usize], a: &[usize], b: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = out_shape.len();
    let bstride = |shape: &[usize]| -> Vec<usize> {
        strides(shape)
            .into_iter()
            .zip(shape)
            .map(|(s, &d)| if d == 1 { 0 } else { s })
            .collect()
    };
    let (sa, sb) = (bstride(a), bstride(b));
    let total: usize = out_shape.iter().product();
    if rank == 0 || total == 0 {
        return;
    }
    let inner = out_shape[rank - 1];
    let (ia_step, ib_step) = (sa[rank - 1], sb[rank - 1]);
    let mut index = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    let mut o = 0;
    while o < total {
        for j in 0..inner {
            f(o + j, ia + j * ia_step, ib + j * ib_step);
        }
        o += inner;
        // advance the odometer over the leading axes
        let mut axis = rank - 1;
        while axis > 0 {
            axis -= 1;
            index[axis] += 1;
            ia += sa[axis];
            ib += sb[axis];
            if index[axis] < out_shape[axis] {
                break;
            }
            ia -= sa[axis] * out_shape[axis];
            ib -= sb[axis] * out_shape[axis];
            index[axis] = 0;
        }
    }
}

/// Visits source offsets of a strided view in row-major order of `shape`.
fn for_each_strided(shape: &[usize], view_strides: &[usize], mut f: impl FnMut(usize)) {
    let rank = shape.len();
    let total: usize = shape.iter().product();
    if rank == 0 || total == 0 {
        return;
    }
    let mut index = vec![0usize; rank];
    let mut offset = 0usize;
    let inner = shape[rank - 1];
    let step = view_strides[rank - 1];
    let mut visited = 0;
    while visited < total {
        for j in 0..inner {
            f(offset + j * step);
        }
        visited += inner;
        let mut axis = rank - 1;
        while axis > 0 {
            axis -= 1;
            index[axis] += 1;
            offset += view_strides[axis];
            if index[axis] < shape[axis] {
                break;
            }
            offset -= view_strides[axis] * shape[axis];
            index[axis] = 0;
        }
    }
}

/// Sums a gradient of `out_shape` down to a broadcast operand's `shape`.
fn reduce_to(g: &[f64], out_shape: &[usize], shape: &[usize]) -> Vec<f64> {
    if out_shape == shape {
        return g.to_vec();
    }
    let mut out = vec![0.0; shape.iter().product()];
    for_each_broadcast(out_shape, out_shape, shape, |o, _, i| out[i] += g[o]);
    out
}
