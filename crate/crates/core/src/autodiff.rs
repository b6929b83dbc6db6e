//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only list of nodes. Every operation evaluates
//! eagerly, caches its output and records its inputs, which always have
//! smaller ids than the node itself, so the graph is acyclic by
//! construction. [`Graph::backward`] walks the nodes once in reverse id
//! order.
//!
//! There is no implicit broadcasting. Binary elementwise operations need
//! identical shapes; the only row-wise operations are the explicitly named
//! [`Graph::add_row`], [`Graph::softmax`] (last axis) and [`Graph::concat`]
//! (last axis).

use crate::error::{Error, Result};
use crate::tensor::{matmul_raw, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Tanh,
    Relu,
    Exp,
    Log,
    /// `ln(1 + e^x)`, evaluated without overflow.
    Softplus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Parameter,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Binary(Binary, NodeId, NodeId),
    Unary(Unary, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    AddRow(NodeId, NodeId),
    Softmax(NodeId),
    Concat(Vec<NodeId>),
    SliceCols {
        input: NodeId,
        start: usize,
        len: usize,
    },
    ReduceSum(NodeId),
    Clamp {
        input: NodeId,
        lo: f64,
        hi: f64,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<NodeId>,
}

/// Gradients of a scalar loss with respect to every node of a graph.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<NodeId>,
}

impl Gradients {
    /// Gradient for `id`; nodes the loss does not depend on get zeros.
    pub fn wrt(&self, id: NodeId) -> Tensor {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[id.0]),
        }
    }

    /// Gradients of all parameters, in registration order.
    pub fn parameters(&self) -> Vec<Tensor> {
        self.params.iter().map(|&p| self.wrt(p)).collect()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Softmax of one slice with max subtraction.
pub fn softmax_slice(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

impl Unary {
    fn forward(self, x: f64) -> f64 {
        match self {
            Unary::Sigmoid => sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::Relu => x.max(0.0),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Softplus => softplus(x),
        }
    }

    /// Local derivative given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Tanh => 1.0 - y * y,
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Softplus => sigmoid(x),
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn parameters(&self) -> &[NodeId] {
        &self.params
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        id
    }

    fn grad_flag(&self, inputs: &[NodeId]) -> bool {
        inputs.iter().any(|i| self.nodes[i.0].requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant, value, false)
    }

    /// Registers a trainable leaf.
    pub fn parameter(&mut self, value: Tensor) -> NodeId {
        let id = self.push(Op::Parameter, value, true);
        self.params.push(id);
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::matrix(m, n, data)?;
        let rg = self.grad_flag(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), value, rg))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).transpose()?;
        let rg = self.grad_flag(&[a]);
        Ok(self.push(Op::Transpose(a), value, rg))
    }

    pub fn binary(&mut self, op: Binary, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            let name = match op {
                Binary::Add => "add",
                Binary::Sub => "sub",
                Binary::Mul => "mul",
            };
            return Err(Error::shape(name, va.shape(), vb.shape()));
        }
        let value = match op {
            Binary::Add => va.zip_map(vb, |x, y| x + y)?,
            Binary::Sub => va.zip_map(vb, |x, y| x - y)?,
            Binary::Mul => va.zip_map(vb, |x, y| x * y)?,
        };
        let rg = self.grad_flag(&[a, b]);
        Ok(self.push(Op::Binary(op, a, b), value, rg))
    }

    pub fn unary(&mut self, op: Unary, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        if op == Unary::Log {
            if let Some(bad) = va.data().iter().find(|&&v| v.is_nan() || v <= 0.0) {
                return Err(Error::Domain {
                    op: "log",
                    detail: format!("input {bad} is not strictly positive"),
                });
            }
        }
        let value = va.map(|x| op.forward(x));
        let rg = self.grad_flag(&[a]);
        Ok(self.push(Op::Unary(op, a), value, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Tanh, a)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Relu, a)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Log, a)
    }

    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Softplus, a)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let value = self.value(a).map(|x| x * factor);
        let rg = self.grad_flag(&[a]);
        self.push(Op::Scale(a, factor), value, rg)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.value(a).map(|x| x + c);
        let rg = self.grad_flag(&[a]);
        self.push(Op::AddScalar(a), value, rg)
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (va, vr) = (self.value(a), self.value(row));
        if va.rank() != 2 || vr.rank() != 1 || va.cols() != vr.len() {
            return Err(Error::shape("add_row", va.shape(), vr.shape()));
        }
        let n = vr.len();
        let mut data = va.data().to_vec();
        for chunk in data.chunks_mut(n.max(1)) {
            for (d, &r) in chunk.iter_mut().zip(vr.data()) {
                *d += r;
            }
        }
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.grad_flag(&[a, row]);
        Ok(self.push(Op::AddRow(a, row), value, rg))
    }

    /// Softmax over the last axis: the whole vector for rank 1, each row for
    /// rank 2.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        if va.is_empty() || va.rank() == 0 || va.rank() > 2 {
            return Err(Error::Empty("softmax"));
        }
        let n = va.cols();
        let mut data = Vec::with_capacity(va.len());
        for row in va.data().chunks(n) {
            data.extend(softmax_slice(row));
        }
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.grad_flag(&[a]);
        Ok(self.push(Op::Softmax(a), value, rg))
    }

    /// Concatenates vectors, or matrices with equal row counts along columns.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts.first().ok_or(Error::Empty("concat"))?;
        let rank = self.value(first).rank();
        let rows = self.value(first).rows();
        for &p in parts {
            let v = self.value(p);
            if v.rank() != rank || rank == 0 || rank > 2 || v.rows() != rows {
                return Err(Error::shape("concat", self.shape(first), v.shape()));
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let v = self.value(p);
                if v.cols() > 0 {
                    data.extend_from_slice(v.row(r));
                }
            }
        }
        let shape = if rank == 1 { vec![total] } else { vec![rows, total] };
        let value = Tensor::new(shape, data)?;
        let rg = self.grad_flag(parts);
        Ok(self.push(Op::Concat(parts.to_vec()), value, rg))
    }

    /// Columns `start..start+len` along the last axis.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let va = self.value(a);
        if va.rank() == 0 || va.rank() > 2 || start + len > va.cols() {
            return Err(Error::shape("slice_cols", va.shape(), &[start, len]));
        }
        let mut data = Vec::with_capacity(va.rows() * len);
        for r in 0..va.rows() {
            data.extend_from_slice(&va.row(r)[start..start + len]);
        }
        let shape = if va.rank() == 1 {
            vec![len]
        } else {
            vec![va.rows(), len]
        };
        let value = Tensor::new(shape, data)?;
        let rg = self.grad_flag(&[a]);
        Ok(self.push(Op::SliceCols { input: a, start, len }, value, rg))
    }

    pub fn reduce_sum(&mut self, a: NodeId) -> NodeId {
        let total = self.value(a).data().iter().sum();
        let rg = self.grad_flag(&[a]);
        self.push(Op::ReduceSum(a), Tensor::scalar(total), rg)
    }

    /// Clamps to `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let value = self.value(a).map(|x| x.clamp(lo, hi));
        let rg = self.grad_flag(&[a]);
        self.push(Op::Clamp { input: a, lo, hi }, value, rg)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(loss_value.shape()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            params: self.params.clone(),
        })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let needs = |id: NodeId| self.nodes[id.0].requires_grad;
        match &node.op {
            Op::Constant | Op::Parameter => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if needs(*a) {
                    let bt = vb.transpose()?;
                    let ga = matmul_raw(g.data(), bt.data(), m, n, k);
                    accumulate(grads, *a, Tensor::matrix(m, k, ga)?)?;
                }
                if needs(*b) {
                    let at = va.transpose()?;
                    let gb = matmul_raw(at.data(), g.data(), k, m, n);
                    accumulate(grads, *b, Tensor::matrix(k, n, gb)?)?;
                }
            }
            Op::Transpose(a) => {
                accumulate(grads, *a, g.transpose()?)?;
            }
            Op::Binary(op, a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                match op {
                    Binary::Add => {
                        if needs(*a) {
                            accumulate(grads, *a, g.clone())?;
                        }
                        if needs(*b) {
                            accumulate(grads, *b, g.clone())?;
                        }
                    }
                    Binary::Sub => {
                        if needs(*a) {
                            accumulate(grads, *a, g.clone())?;
                        }
                        if needs(*b) {
                            accumulate(grads, *b, g.map(|x| -x))?;
                        }
                    }
                    Binary::Mul => {
                        if needs(*a) {
                            accumulate(grads, *a, g.zip_map(vb, |x, y| x * y)?)?;
                        }
                        if needs(*b) {
                            accumulate(grads, *b, g.zip_map(va, |x, y| x * y)?)?;
                        }
                    }
                }
            }
            Op::Unary(op, a) => {
                let va = self.value(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(va.data())
                    .zip(node.value.data())
                    .map(|((&gi, &x), &y)| gi * op.derivative(x, y))
                    .collect();
                accumulate(grads, *a, Tensor::new(va.shape().to_vec(), data)?)?;
            }
            Op::Scale(a, factor) => {
                accumulate(grads, *a, g.map(|x| x * factor))?;
            }
            Op::AddScalar(a) => {
                accumulate(grads, *a, g.clone())?;
            }
            Op::AddRow(a, row) => {
                if needs(*a) {
                    accumulate(grads, *a, g.clone())?;
                }
                if needs(*row) {
                    let n = g.cols();
                    let mut sums = vec![0.0; n];
                    for chunk in g.data().chunks(n.max(1)) {
                        for (s, &v) in sums.iter_mut().zip(chunk) {
                            *s += v;
                        }
                    }
                    accumulate(grads, *row, Tensor::vector(sums))?;
                }
            }
            Op::Softmax(a) => {
                let n = g.cols();
                let mut data = Vec::with_capacity(g.len());
                for (gr, yr) in g.data().chunks(n).zip(node.value.data().chunks(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                    data.extend(gr.iter().zip(yr).map(|(&gi, &yi)| yi * (gi - dot)));
                }
                accumulate(grads, *a, Tensor::new(g.shape().to_vec(), data)?)?;
            }
            Op::Concat(parts) => {
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let vp = self.value(p);
                    let w = vp.cols();
                    if needs(p) {
                        let mut data = Vec::with_capacity(vp.len());
                        for r in 0..vp.rows() {
                            let row = &g.data()[r * total..(r + 1) * total];
                            data.extend_from_slice(&row[offset..offset + w]);
                        }
                        accumulate(grads, p, Tensor::new(vp.shape().to_vec(), data)?)?;
                    }
                    offset += w;
                }
            }
            Op::SliceCols { input, start, len } => {
                let vi = self.value(*input);
                let c = vi.cols();
                let mut data = vec![0.0; vi.len()];
                for r in 0..vi.rows() {
                    data[r * c + start..r * c + start + len]
                        .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                }
                accumulate(grads, *input, Tensor::new(vi.shape().to_vec(), data)?)?;
            }
            Op::ReduceSum(a) => {
                let gs = g.data()[0];
                accumulate(grads, *a, Tensor::full(self.shape(*a), gs))?;
            }
            Op::Clamp { input, lo, hi } => {
                let vi = self.value(*input);
                let data = g
                    .data()
                    .iter()
                    .zip(vi.data())
                    .map(|(&gi, &x)| if x >= *lo && x <= *hi { gi } else { 0.0 })
                    .collect();
                accumulate(grads, *input, Tensor::new(vi.shape().to_vec(), data)?)?;
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) -> Result<()> {
    match &mut grads[id.0] {
        Some(existing) => {
            if existing.shape() != g.shape() {
                return Err(Error::shape("accumulate", existing.shape(), g.shape()));
            }
            for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
    Ok(())
}
