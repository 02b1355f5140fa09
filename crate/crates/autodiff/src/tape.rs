use crate::tensor::{axis_extents, Tensor};
use crate::AutodiffError;

/// Inputs below this are clamped before `log`.
pub const LOG_FLOOR: f64 = 1e-300;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    LeakyRelu(Var, f64),
    Sin(Var),
    Cos(Var),
    Softmax(Var, usize),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Sum(Var, usize),
    SumAll(Var),
    Max {
        x: Var,
        axis: usize,
        argmax: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a computation for one forward pass and replays it backwards.
///
/// Nodes are appended in evaluation order, so index order is already a
/// topological order of the graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; `None` when `v` does not reach the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), AutodiffError> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(AutodiffError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<(), AutodiffError> {
    if axis < shape.len() {
        Ok(())
    } else {
        Err(AutodiffError::InvalidAxis {
            op,
            axis,
            shape: shape.to_vec(),
        })
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = self.any_input_needs_grad(&op);
        self.push_node(value, op, needs_grad)
    }

    fn push_node(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn any_input_needs_grad(&self, op: &Op) -> bool {
        match op {
            Op::Leaf => false,
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::AddRow(a, b) => self.needs(*a) || self.needs(*b),
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Softplus(a)
            | Op::LeakyRelu(a, _)
            | Op::Sin(a)
            | Op::Cos(a)
            | Op::Softmax(a, _)
            | Op::Sum(a, _)
            | Op::SumAll(a) => self.needs(*a),
            Op::Slice { x, .. } | Op::Max { x, .. } => self.needs(*x),
            Op::Concat(parts, _) => parts.iter().any(|p| self.needs(*p)),
        }
    }

    /// Registers a differentiable input (parameter or data leaf).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_node(value, Op::Leaf, true)
    }

    /// A leaf excluded from differentiation; [`Gradients::get`] returns `None`
    /// for it and for anything computed only from constants.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_node(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (dims_a, dims_b) = (av.dims2(), bv.dims2());
        let ((m, k), (k2, n)) = match (dims_a, dims_b) {
            (Some(x), Some(y)) if x.1 == y.0 => (x, y),
            _ => {
                return Err(AutodiffError::ShapeMismatch {
                    op: "matmul",
                    lhs: av.shape().to_vec(),
                    rhs: bv.shape().to_vec(),
                })
            }
        };
        debug_assert_eq!(k, k2);
        let (ad, bd) = (av.data(), bv.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a_ip = ad[i * k + p];
                let brow = &bd[p * n..(p + 1) * n];
                for (o, &b) in row.iter_mut().zip(brow) {
                    *o += a_ip * b;
                }
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let av = self.value(a);
        let (m, n) = av.dims2().ok_or_else(|| AutodiffError::ShapeMismatch {
            op: "transpose",
            lhs: av.shape().to_vec(),
            rhs: vec![],
        })?;
        let d = av.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(value, Op::Transpose(a)))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, AutodiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(name, av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Adds a row vector (`[n]` or `[1, n]`) to every row of an `[m, n]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, AutodiffError> {
        let (av, rv) = (self.value(a), self.value(row));
        let n = rv.len();
        let row_ok = matches!(rv.shape(), [_] | [1, _]);
        let cols = av.dims2().map(|d| d.1);
        if !row_ok || cols != Some(n) {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_row",
                lhs: av.shape().to_vec(),
                rhs: rv.shape().to_vec(),
            });
        }
        let r = rv.data();
        let mut data = av.data().to_vec();
        for chunk in data.chunks_mut(n.max(1)) {
            for (o, &b) in chunk.iter_mut().zip(r) {
                *o += b;
            }
        }
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddRow(a, row)))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).map(f);
        self.push(value, op)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// Natural log with inputs clamped to at least [`LOG_FLOOR`].
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(LOG_FLOOR).ln(), Op::Log(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(
            a,
            |x| if x > 0.0 { x } else { slope * x },
            Op::LeakyRelu(a, slope),
        )
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, f64::sin, Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, f64::cos, Op::Cos(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        // Recorded as a self-product so fan-out accumulation is exercised.
        self.mul(a, a).expect("identical shapes")
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, AutodiffError> {
        let av = self.value(a);
        check_axis("softmax", av.shape(), axis)?;
        let (outer, len, inner) = axis_extents(av.shape(), axis);
        let src = av.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| src[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..len {
                    let e = (src[idx(k)] - max).exp();
                    out[idx(k)] = e;
                    total += e;
                }
                for k in 0..len {
                    out[idx(k)] /= total;
                }
            }
        }
        let value = Tensor::new(av.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Softmax(a, axis)))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, AutodiffError> {
        let first = parts.first().ok_or(AutodiffError::EmptyConcat)?;
        let base = self.value(*first).shape().to_vec();
        check_axis("concat", &base, axis)?;
        let mut joined = 0;
        for p in parts {
            let s = self.value(*p).shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            joined += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = joined;
        let (outer, _, inner) = axis_extents(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let v = self.value(*p);
                let block = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * block..(o + 1) * block]);
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Concat(parts.to_vec(), axis)))
    }

    /// Half-open range `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var, AutodiffError> {
        let av = self.value(a);
        check_axis("slice", av.shape(), axis)?;
        if start > end || end > av.shape()[axis] {
            return Err(AutodiffError::InvalidSlice {
                axis,
                start,
                end,
                shape: av.shape().to_vec(),
            });
        }
        let (outer, len, inner) = axis_extents(av.shape(), axis);
        let width = end - start;
        let mut out = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = (o * len + start) * inner;
            out.extend_from_slice(&av.data()[base..base + width * inner]);
        }
        let mut shape = av.shape().to_vec();
        shape[axis] = width;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Slice { x: a, axis, start }))
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var, AutodiffError> {
        let av = self.value(a);
        check_axis("sum", av.shape(), axis)?;
        let (outer, len, inner) = axis_extents(av.shape(), axis);
        let src = av.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += src[(o * len + k) * inner + i];
                }
            }
        }
        let mut shape = av.shape().to_vec();
        shape[axis] = 1;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Sum(a, axis)))
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(total), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Max along `axis`, keeping it with extent 1. Ties route the gradient to
    /// the first maximal element.
    pub fn max(&mut self, a: Var, axis: usize) -> Result<Var, AutodiffError> {
        let av = self.value(a);
        check_axis("max", av.shape(), axis)?;
        let (outer, len, inner) = axis_extents(av.shape(), axis);
        if len == 0 {
            return Err(AutodiffError::InvalidAxis {
                op: "max",
                axis,
                shape: av.shape().to_vec(),
            });
        }
        let src = av.data();
        let mut out = vec![0.0; outer * inner];
        let mut argmax = vec![0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                let mut best_v = src[o * len * inner + i];
                for k in 1..len {
                    let v = src[(o * len + k) * inner + i];
                    if v > best_v {
                        best = k;
                        best_v = v;
                    }
                }
                out[o * inner + i] = best_v;
                argmax[o * inner + i] = best;
            }
        }
        let mut shape = av.shape().to_vec();
        shape[axis] = 1;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Max { x: a, axis, argmax }))
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AutodiffError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(AutodiffError::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) || !node.needs_grad {
                continue;
            }
            let (before, rest) = grads.split_at_mut(idx);
            let Some(g) = rest[0].as_deref() else { continue };
            self.propagate(node, g, before);
        }
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.needs_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let need = |v: &Var| self.needs(*v);
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = av.dims2().expect("2-D");
                let n = bv.dims2().expect("2-D").1;
                let (ad, bd) = (av.data(), bv.data());
                if need(a) {
                    let ga = acc(grads, *a, m * k);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            let dot: f64 = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                            ga[i * k + p] += dot;
                        }
                    }
                }
                if !need(b) {
                    return;
                }
                let gb = acc(grads, *b, k * n);
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let a_ip = ad[i * k + p];
                        let row = &mut gb[p * n..(p + 1) * n];
                        for (o, &x) in row.iter_mut().zip(grow) {
                            *o += a_ip * x;
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (m, n) = self.value(*a).dims2().expect("2-D");
                let ga = acc(grads, *a, m * n);
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] += g[j * m + i];
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    let gv = acc(grads, *v, g.len());
                    gv.iter_mut().zip(g).for_each(|(o, x)| *o += x);
                }
            }
            Op::Sub(a, b) => {
                let ga = acc(grads, *a, g.len());
                ga.iter_mut().zip(g).for_each(|(o, x)| *o += x);
                let gb = acc(grads, *b, g.len());
                gb.iter_mut().zip(g).for_each(|(o, x)| *o -= x);
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                {
                    let ga = acc(grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * bd[i];
                    }
                }
                let gb = acc(grads, *b, g.len());
                for i in 0..g.len() {
                    gb[i] += g[i] * ad[i];
                }
            }
            Op::Div(a, b) => {
                let bd = self.value(*b).data();
                {
                    let ga = acc(grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] / bd[i];
                    }
                }
                let gb = acc(grads, *b, g.len());
                for i in 0..g.len() {
                    gb[i] -= g[i] * y[i] / bd[i];
                }
            }
            Op::AddRow(a, row) => {
                {
                    let ga = acc(grads, *a, g.len());
                    ga.iter_mut().zip(g).for_each(|(o, x)| *o += x);
                }
                let n = self.value(*row).len();
                let gr = acc(grads, *row, n);
                for chunk in g.chunks(n.max(1)) {
                    gr.iter_mut().zip(chunk).for_each(|(o, x)| *o += x);
                }
            }
            Op::Scale(a, s) => {
                let ga = acc(grads, *a, g.len());
                ga.iter_mut().zip(g).for_each(|(o, x)| *o += s * x);
            }
            Op::AddScalar(a) => {
                let ga = acc(grads, *a, g.len());
                ga.iter_mut().zip(g).for_each(|(o, x)| *o += x);
            }
            Op::Sigmoid(a) => {
                let ga = acc(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }
            Op::Tanh(a) => {
                let ga = acc(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            }
            Op::Exp(a) => {
                let ga = acc(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * y[i];
                }
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                let ga = acc(grads, *a, g.len());
                for i in 0..g.len() {
                    if x[i] >= LOG_FLOOR {
                        ga[i] += g[i] / x[i];
                    }
                }
            }
            Op::Softplus(a) => {
                let x = self.value(*a).data();
                let ga = acc(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * sigmoid(x[i]);
                }
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.value(*a).data();
                let ga = acc(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += if x[i] > 0.0 { g[i] } else { slope * g[i] };
                }
            }
            Op::Sin(a) => {
                let x = self.value(*a).data();
                let ga = acc(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * x[i].cos();
                }
            }
            Op::Cos(a) => {
                let x = self.value(*a).data();
                let ga = acc(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] -= g[i] * x[i].sin();
                }
            }
            Op::Softmax(a, axis) => {
                let (outer, len, inner) = axis_extents(node.value.shape(), *axis);
                let ga = acc(grads, *a, g.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + i;
                        let dot: f64 = (0..len).map(|k| g[idx(k)] * y[idx(k)]).sum();
                        for k in 0..len {
                            ga[idx(k)] += y[idx(k)] * (g[idx(k)] - dot);
                        }
                    }
                }
            }
            Op::Concat(parts, axis) => {
                let (outer, _, inner) = axis_extents(node.value.shape(), *axis);
                let mut offset = 0;
                let total = node.value.shape()[*axis] * inner;
                for p in parts {
                    let pv = self.value(*p);
                    let block = pv.shape()[*axis] * inner;
                    let gp = acc(grads, *p, pv.len());
                    for o in 0..outer {
                        let src = &g[o * total + offset..o * total + offset + block];
                        gp[o * block..(o + 1) * block]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, s)| *d += s);
                    }
                    offset += block;
                }
            }
            Op::Slice { x, axis, start } => {
                let xv = self.value(*x);
                let (outer, len, inner) = axis_extents(xv.shape(), *axis);
                let width = node.value.shape()[*axis];
                let gx = acc(grads, *x, xv.len());
                for o in 0..outer {
                    let base = (o * len + start) * inner;
                    gx[base..base + width * inner]
                        .iter_mut()
                        .zip(&g[o * width * inner..(o + 1) * width * inner])
                        .for_each(|(d, s)| *d += s);
                }
            }
            Op::Sum(a, axis) => {
                let av = self.value(*a);
                let (outer, len, inner) = axis_extents(av.shape(), *axis);
                let ga = acc(grads, *a, av.len());
                for o in 0..outer {
                    for k in 0..len {
                        for i in 0..inner {
                            ga[(o * len + k) * inner + i] += g[o * inner + i];
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                let n = self.value(*a).len();
                let ga = acc(grads, *a, n);
                ga.iter_mut().for_each(|o| *o += g[0]);
            }
            Op::Max { x, axis, argmax } => {
                let xv = self.value(*x);
                let (_, len, inner) = axis_extents(xv.shape(), *axis);
                let gx = acc(grads, *x, xv.len());
                for (flat, &k) in argmax.iter().enumerate() {
                    let (o, i) = (flat / inner, flat % inner);
                    gx[(o * len + k) * inner + i] += g[flat];
                }
            }
        }
    }
}
