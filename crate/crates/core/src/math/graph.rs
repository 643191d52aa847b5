//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in insertion
//! order. Calling [`Graph::backward`] walks the tape once, from the loss back
//! to the first node, accumulating gradients into every leaf created with
//! [`Graph::param`]. Leaves created with [`Graph::constant`] never receive a
//! gradient and nodes depending only on constants are skipped entirely, which
//! is how a frozen backbone avoids paying for weight gradients.
//!
//! Graphs are meant to live for one training step and be dropped afterwards.

use std::cell::{Ref, RefCell};
use std::fmt;

use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_COEF: f64 = 0.044_715;
// sqrt(2 / pi)
const GELU_SCALE: f64 = 0.797_884_560_802_865_4;

/// The named operation set used by the generic [`Graph::forward_op`] entry
/// point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    MatMul,
    Add,
    ScalarMul,
    ElementwiseMul,
    ConcatSequence,
    LayerNorm,
    Gelu,
    Softmax,
    Mean,
    L2Norm,
    FrobeniusInner,
    Sigmoid,
}

impl OpKind {
    pub const ALL: [OpKind; 12] = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::ScalarMul,
        OpKind::ElementwiseMul,
        OpKind::ConcatSequence,
        OpKind::LayerNorm,
        OpKind::Gelu,
        OpKind::Softmax,
        OpKind::Mean,
        OpKind::L2Norm,
        OpKind::FrobeniusInner,
        OpKind::Sigmoid,
    ];
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddConst(usize),
    ScalarMul { scalar: usize, tensor: usize },
    Concat { parts: Vec<usize>, axis: usize },
    Slice { input: usize, axis: usize, start: usize },
    LayerNorm { input: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(usize),
    Softmax(usize),
    Sigmoid(usize),
    Mean(usize),
    Sum(usize),
    MeanRows(usize),
    L2Norm(usize),
    Frobenius(usize, usize),
    CrossEntropy { logits: usize, label: usize, probs: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// An append-only differentiation tape.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; exactly zero when the
    /// loss does not depend on it.
    pub fn of(&self, var: Var<'_>) -> Tensor {
        self.get(var.id)
    }

    fn get(&self, id: usize) -> Tensor {
        let shape = self.shapes[id].clone();
        match &self.grads[id] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn record(&self, op_name: &'static str, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var<'_>> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].requires_grad)
        };
        Ok(self.push(value, op, requires_grad))
    }

    fn owns(&self, vars: &[Var<'_>]) -> Result<()> {
        if vars.iter().all(|v| std::ptr::eq(v.graph, self)) {
            Ok(())
        } else {
            Err(Error::GraphMismatch)
        }
    }

    /// Applies one of the named operations to `inputs`.
    pub fn forward_op<'g>(&'g self, kind: OpKind, inputs: &[Var<'g>]) -> Result<Var<'g>> {
        self.owns(inputs)?;
        let arity = match kind {
            OpKind::MatMul
            | OpKind::Add
            | OpKind::ScalarMul
            | OpKind::ElementwiseMul
            | OpKind::FrobeniusInner => 2,
            OpKind::ConcatSequence => inputs.len().max(1),
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::Shape {
                op: "forward_op",
                shapes: inputs.iter().map(|v| v.shape()).collect(),
            });
        }
        let a = inputs[0];
        match kind {
            OpKind::MatMul => a.matmul(inputs[1]),
            OpKind::Add => a.add(inputs[1]),
            OpKind::ScalarMul => a.scalar_mul(inputs[1]),
            OpKind::ElementwiseMul => a.mul(inputs[1]),
            OpKind::ConcatSequence => self.concat_rows(inputs),
            OpKind::LayerNorm => a.layer_norm(),
            OpKind::Gelu => a.gelu(),
            OpKind::Softmax => a.softmax(),
            OpKind::Mean => a.mean(),
            OpKind::L2Norm => a.l2_norm(),
            OpKind::FrobeniusInner => a.frobenius(inputs[1]),
            OpKind::Sigmoid => a.sigmoid(),
        }
    }

    /// Concatenates rank-2 tensors along the sequence (row) axis.
    pub fn concat_rows<'g>(&'g self, parts: &[Var<'g>]) -> Result<Var<'g>> {
        self.concat(parts, 0)
    }

    /// Concatenates rank-2 tensors along the feature (column) axis.
    pub fn concat_cols<'g>(&'g self, parts: &[Var<'g>]) -> Result<Var<'g>> {
        self.concat(parts, 1)
    }

    fn concat<'g>(&'g self, parts: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
        self.owns(parts)?;
        let op = if axis == 0 { "concat_rows" } else { "concat_cols" };
        let shapes: Vec<Vec<usize>> = parts.iter().map(|v| v.shape()).collect();
        let other = 1 - axis;
        let ok = !shapes.is_empty()
            && shapes.iter().all(|s| s.len() == 2 && s[other] == shapes[0][other]);
        if !ok {
            return Err(Error::Shape { op, shapes });
        }
        let value = {
            let nodes = self.nodes.borrow();
            let tensors: Vec<&Tensor> = parts.iter().map(|v| &nodes[v.id].value).collect();
            if axis == 0 {
                let rows = shapes.iter().map(|s| s[0]).sum();
                let mut data = Vec::with_capacity(rows * shapes[0][1]);
                for t in &tensors {
                    data.extend_from_slice(t.data());
                }
                Tensor::from_parts(vec![rows, shapes[0][1]], data)
            } else {
                let rows = shapes[0][0];
                let cols: usize = shapes.iter().map(|s| s[1]).sum();
                let mut data = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for t in &tensors {
                        data.extend_from_slice(t.row(r));
                    }
                }
                Tensor::from_parts(vec![rows, cols], data)
            }
        };
        let ids: Vec<usize> = parts.iter().map(|v| v.id).collect();
        self.record(op, value, Op::Concat { parts: ids.clone(), axis }, &ids)
    }

    fn value_of(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Runs the reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.graph, self) {
            return Err(Error::DetachedLoss);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Err(Error::DetachedLoss);
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[id].take() else { continue };
            backprop(&nodes, node, &dy, &mut grads);
            grads[id] = Some(dy);
        }

        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, delta: Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(delta) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn backprop(nodes: &[Node], node: &Node, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &node.value;
    let val = |id: usize| &nodes[id].value;
    let needs = |id: usize| nodes[id].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.rows(), av.cols(), bv.cols());
            if needs(*a) {
                accumulate(grads, nodes, *a, kernels::matmul_a_bt(dy, bv.data(), m, n, k));
            }
            if needs(*b) {
                accumulate(grads, nodes, *b, kernels::matmul_at_b(av.data(), dy, m, k, n));
            }
        }
        Op::Transpose(a) => {
            let av = val(*a);
            accumulate(grads, nodes, *a, kernels::transpose(dy, av.cols(), av.rows()));
        }
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, dy.to_vec());
            accumulate(grads, nodes, *b, dy.to_vec());
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, dy.to_vec());
            accumulate(grads, nodes, *b, dy.iter().map(|g| -g).collect());
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if needs(*a) {
                let d = dy.iter().zip(bv.data()).map(|(g, y)| g * y).collect();
                accumulate(grads, nodes, *a, d);
            }
            if needs(*b) {
                let d = dy.iter().zip(av.data()).map(|(g, x)| g * x).collect();
                accumulate(grads, nodes, *b, d);
            }
        }
        Op::Div(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if needs(*a) {
                let d = dy.iter().zip(bv.data()).map(|(g, y)| g / y).collect();
                accumulate(grads, nodes, *a, d);
            }
            if needs(*b) {
                let d = dy
                    .iter()
                    .zip(av.data().iter().zip(bv.data()))
                    .map(|(g, (x, y))| -g * x / (y * y))
                    .collect();
                accumulate(grads, nodes, *b, d);
            }
        }
        Op::Scale(a, c) => accumulate(grads, nodes, *a, dy.iter().map(|g| g * c).collect()),
        Op::AddConst(a) => accumulate(grads, nodes, *a, dy.to_vec()),
        Op::ScalarMul { scalar, tensor } => {
            let s = val(*scalar).item();
            let t = val(*tensor);
            if needs(*scalar) {
                let ds = dy.iter().zip(t.data()).map(|(g, x)| g * x).sum();
                accumulate(grads, nodes, *scalar, vec![ds]);
            }
            if needs(*tensor) {
                accumulate(grads, nodes, *tensor, dy.iter().map(|g| g * s).collect());
            }
        }
        Op::Concat { parts, axis } => {
            if *axis == 0 {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).len();
                    accumulate(grads, nodes, p, dy[offset..offset + len].to_vec());
                    offset += len;
                }
            } else {
                let total = out.cols();
                let mut col = 0;
                for &p in parts {
                    let pv = val(p);
                    let w = pv.cols();
                    if needs(p) {
                        let mut d = Vec::with_capacity(pv.len());
                        for r in 0..pv.rows() {
                            d.extend_from_slice(&dy[r * total + col..r * total + col + w]);
                        }
                        accumulate(grads, nodes, p, d);
                    }
                    col += w;
                }
            }
        }
        Op::Slice { input, axis, start } => {
            let iv = val(*input);
            let mut d = vec![0.0; iv.len()];
            let cols = iv.cols();
            if *axis == 0 {
                d[start * cols..start * cols + dy.len()].copy_from_slice(dy);
            } else {
                let w = out.cols();
                for r in 0..iv.rows() {
                    d[r * cols + start..r * cols + start + w].copy_from_slice(&dy[r * w..(r + 1) * w]);
                }
            }
            accumulate(grads, nodes, *input, d);
        }
        Op::LayerNorm { input, xhat, rstd } => {
            let n = out.cols();
            let nf = n as f64;
            let mut d = vec![0.0; dy.len()];
            for (r, &rs) in rstd.iter().enumerate() {
                let g = &dy[r * n..(r + 1) * n];
                let xh = &xhat[r * n..(r + 1) * n];
                let sum_g: f64 = g.iter().sum();
                let sum_gx: f64 = g.iter().zip(xh).map(|(a, b)| a * b).sum();
                for j in 0..n {
                    d[r * n + j] = rs / nf * (nf * g[j] - sum_g - xh[j] * sum_gx);
                }
            }
            accumulate(grads, nodes, *input, d);
        }
        Op::Gelu(a) => {
            let d = dy
                .iter()
                .zip(val(*a).data())
                .map(|(g, &x)| g * gelu_grad(x))
                .collect();
            accumulate(grads, nodes, *a, d);
        }
        Op::Softmax(a) => {
            let n = out.cols();
            let y = out.data();
            let mut d = vec![0.0; dy.len()];
            for r in 0..out.rows() {
                let span = r * n..(r + 1) * n;
                let dot: f64 = dy[span.clone()].iter().zip(&y[span.clone()]).map(|(g, p)| g * p).sum();
                for j in span {
                    d[j] = y[j] * (dy[j] - dot);
                }
            }
            accumulate(grads, nodes, *a, d);
        }
        Op::Sigmoid(a) => {
            let d = dy
                .iter()
                .zip(out.data())
                .map(|(g, y)| g * y * (1.0 - y))
                .collect();
            accumulate(grads, nodes, *a, d);
        }
        Op::Mean(a) => {
            let n = val(*a).len();
            accumulate(grads, nodes, *a, vec![dy[0] / n as f64; n]);
        }
        Op::Sum(a) => {
            let n = val(*a).len();
            accumulate(grads, nodes, *a, vec![dy[0]; n]);
        }
        Op::MeanRows(a) => {
            let av = val(*a);
            let r = av.rows() as f64;
            let mut d = Vec::with_capacity(av.len());
            for _ in 0..av.rows() {
                d.extend(dy.iter().map(|g| g / r));
            }
            accumulate(grads, nodes, *a, d);
        }
        Op::L2Norm(a) => {
            let norm = out.item();
            let d = if norm > 0.0 {
                val(*a).data().iter().map(|x| dy[0] * x / norm).collect()
            } else {
                vec![0.0; val(*a).len()]
            };
            accumulate(grads, nodes, *a, d);
        }
        Op::Frobenius(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if needs(*a) {
                accumulate(grads, nodes, *a, bv.data().iter().map(|y| dy[0] * y).collect());
            }
            if needs(*b) {
                accumulate(grads, nodes, *b, av.data().iter().map(|x| dy[0] * x).collect());
            }
        }
        Op::CrossEntropy { logits, label, probs } => {
            let mut d: Vec<f64> = probs.iter().map(|p| dy[0] * p).collect();
            d[*label] -= dy[0];
            accumulate(grads, nodes, *logits, d);
        }
    }
}

fn gelu(x: f64) -> f64 {
    let t = (GELU_SCALE * (x + GELU_COEF * x * x * x)).tanh();
    0.5 * x * (1.0 + t)
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_SCALE * (x + GELU_COEF * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_SCALE * (1.0 + 3.0 * GELU_COEF * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.value_of(self.id).shape().to_vec()
    }

    /// A copy of the node's current value.
    pub fn value(&self) -> Tensor {
        self.graph.value_of(self.id).clone()
    }

    pub fn item(&self) -> f64 {
        self.graph.value_of(self.id).item()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    fn same_graph(&self, other: Var<'g>) -> Result<()> {
        if std::ptr::eq(self.graph, other.graph) {
            Ok(())
        } else {
            Err(Error::GraphMismatch)
        }
    }

    fn shape_error(op: &'static str, vars: &[Var<'g>]) -> Error {
        Error::Shape {
            op,
            shapes: vars.iter().map(|v| v.shape()).collect(),
        }
    }

    fn unary(self, name: &'static str, op: Op, f: impl FnOnce(&Tensor) -> Tensor) -> Result<Var<'g>> {
        let value = f(&self.graph.value_of(self.id));
        self.graph.record(name, value, op, &[self.id])
    }

    fn elementwise(
        self,
        other: Var<'g>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'g>> {
        self.same_graph(other)?;
        let value = {
            let a = self.graph.value_of(self.id);
            let b = self.graph.value_of(other.id);
            if a.shape() != b.shape() {
                return Err(Self::shape_error(name, &[self, other]));
            }
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::from_parts(a.shape().to_vec(), data)
        };
        self.graph.record(name, value, op, &[self.id, other.id])
    }

    /// Rank-2 matrix product.
    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(other)?;
        let value = {
            let a = self.graph.value_of(self.id);
            let b = self.graph.value_of(other.id);
            if !a.is_matrix() || !b.is_matrix() || a.cols() != b.rows() {
                drop((a, b));
                return Err(Self::shape_error("matmul", &[self, other]));
            }
            let (m, k, n) = (a.rows(), a.cols(), b.cols());
            Tensor::from_parts(vec![m, n], kernels::matmul(a.data(), b.data(), m, k, n))
        };
        self.graph
            .record("matmul", value, Op::MatMul(self.id, other.id), &[self.id, other.id])
    }

    pub fn transpose(self) -> Result<Var<'g>> {
        if self.shape().len() != 2 {
            return Err(Self::shape_error("transpose", &[self]));
        }
        self.unary("transpose", Op::Transpose(self.id), |t| {
            Tensor::from_parts(vec![t.cols(), t.rows()], kernels::transpose(t.data(), t.rows(), t.cols()))
        })
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.elementwise(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.elementwise(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.elementwise(other, "elementwise_mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn div(self, other: Var<'g>) -> Result<Var<'g>> {
        self.elementwise(other, "div", Op::Div(self.id, other.id), |a, b| a / b)
    }

    /// Multiplies by a fixed constant.
    pub fn scale(self, c: f64) -> Result<Var<'g>> {
        self.unary("scale", Op::Scale(self.id, c), |t| t.map(|v| v * c))
    }

    /// Adds a fixed constant to every element.
    pub fn add_const(self, c: f64) -> Result<Var<'g>> {
        self.unary("add_const", Op::AddConst(self.id), |t| t.map(|v| v + c))
    }

    /// `self` must hold a single element; the result is `self * tensor`.
    pub fn scalar_mul(self, tensor: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(tensor)?;
        let value = {
            let s = self.graph.value_of(self.id);
            if s.len() != 1 {
                drop(s);
                return Err(Self::shape_error("scalar_mul", &[self, tensor]));
            }
            let s = s.item();
            self.graph.value_of(tensor.id).map(|v| s * v)
        };
        self.graph.record(
            "scalar_mul",
            value,
            Op::ScalarMul {
                scalar: self.id,
                tensor: tensor.id,
            },
            &[self.id, tensor.id],
        )
    }

    /// Copies `len` rows starting at `start`.
    pub fn slice_rows(self, start: usize, len: usize) -> Result<Var<'g>> {
        self.slice(0, start, len)
    }

    /// Copies `len` columns starting at `start`.
    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'g>> {
        self.slice(1, start, len)
    }

    fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'g>> {
        let shape = self.shape();
        if shape.len() != 2 || len == 0 || start + len > shape[axis] {
            return Err(Error::Shape {
                op: "slice",
                shapes: vec![shape, vec![start, len]],
            });
        }
        self.unary("slice", Op::Slice { input: self.id, axis, start }, |t| {
            if axis == 0 {
                Tensor::from_parts(vec![len, t.cols()], t.data()[start * t.cols()..(start + len) * t.cols()].to_vec())
            } else {
                let mut data = Vec::with_capacity(t.rows() * len);
                for r in 0..t.rows() {
                    data.extend_from_slice(&t.row(r)[start..start + len]);
                }
                Tensor::from_parts(vec![t.rows(), len], data)
            }
        })
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(self) -> Result<Var<'g>> {
        if self.shape().len() != 2 {
            return Err(Self::shape_error("layer_norm", &[self]));
        }
        let (value, xhat, rstd) = {
            let t = self.graph.value_of(self.id);
            let n = t.cols();
            let mut xhat = Vec::with_capacity(t.len());
            let mut rstd = Vec::with_capacity(t.rows());
            for r in 0..t.rows() {
                let row = t.row(r);
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                rstd.push(rs);
                xhat.extend(row.iter().map(|v| (v - mean) * rs));
            }
            (Tensor::from_parts(t.shape().to_vec(), xhat.clone()), xhat, rstd)
        };
        self.graph.record(
            "layer_norm",
            value,
            Op::LayerNorm {
                input: self.id,
                xhat,
                rstd,
            },
            &[self.id],
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(self) -> Result<Var<'g>> {
        self.unary("gelu", Op::Gelu(self.id), |t| t.map(gelu))
    }

    pub fn sigmoid(self) -> Result<Var<'g>> {
        self.unary("sigmoid", Op::Sigmoid(self.id), |t| t.map(sigmoid))
    }

    /// Row-wise softmax of a rank-2 tensor.
    pub fn softmax(self) -> Result<Var<'g>> {
        if self.shape().len() != 2 {
            return Err(Self::shape_error("softmax", &[self]));
        }
        self.unary("softmax", Op::Softmax(self.id), |t| {
            let n = t.cols();
            let mut data = Vec::with_capacity(t.len());
            for r in 0..t.rows() {
                data.extend(kernels::softmax_row(t.row(r)));
            }
            Tensor::from_parts(vec![t.rows(), n], data)
        })
    }

    /// Mean of all elements.
    pub fn mean(self) -> Result<Var<'g>> {
        self.unary("mean", Op::Mean(self.id), |t| Tensor::scalar(t.sum() / t.len() as f64))
    }

    pub fn sum(self) -> Result<Var<'g>> {
        self.unary("sum", Op::Sum(self.id), |t| Tensor::scalar(t.sum()))
    }

    /// Averages the rows of a rank-2 tensor into a single row.
    pub fn mean_rows(self) -> Result<Var<'g>> {
        if self.shape().len() != 2 {
            return Err(Self::shape_error("mean_rows", &[self]));
        }
        self.unary("mean_rows", Op::MeanRows(self.id), |t| {
            let (r, c) = (t.rows(), t.cols());
            let mut data = vec![0.0; c];
            for i in 0..r {
                for (acc, v) in data.iter_mut().zip(t.row(i)) {
                    *acc += v;
                }
            }
            data.iter_mut().for_each(|v| *v /= r as f64);
            Tensor::from_parts(vec![1, c], data)
        })
    }

    /// Euclidean norm of the flattened tensor.
    pub fn l2_norm(self) -> Result<Var<'g>> {
        self.unary("l2_norm", Op::L2Norm(self.id), |t| Tensor::scalar(t.norm()))
    }

    /// Sum over all positions of `self * other`.
    pub fn frobenius(self, other: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(other)?;
        let value = {
            let a = self.graph.value_of(self.id);
            let b = self.graph.value_of(other.id);
            if a.shape() != b.shape() {
                drop((a, b));
                return Err(Self::shape_error("frobenius_inner_product", &[self, other]));
            }
            Tensor::scalar(a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum())
        };
        self.graph.record(
            "frobenius_inner_product",
            value,
            Op::Frobenius(self.id, other.id),
            &[self.id, other.id],
        )
    }

    /// Softmax cross-entropy of a `[1, C]` (or `[C]`) logit row against
    /// `label`.
    pub fn cross_entropy(self, label: usize) -> Result<Var<'g>> {
        let (value, probs) = {
            let t = self.graph.value_of(self.id);
            let n = t.len();
            if label >= n || (t.shape().len() == 2 && t.rows() != 1) {
                drop(t);
                return Err(Self::shape_error("cross_entropy", &[self]));
            }
            let probs = kernels::softmax_row(t.data());
            let max = t.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + t.data().iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            (Tensor::scalar(lse - t.data()[label]), probs)
        };
        self.graph.record(
            "cross_entropy",
            value,
            Op::CrossEntropy {
                logits: self.id,
                label,
                probs,
            },
            &[self.id],
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let g = Graph::new();
        let x = m(&[vec![1.5, -2.0, 0.25], vec![3.0, 4.0, -7.0]]);
        let id = g.constant(Tensor::identity(2));
        let xv = g.constant(x.clone());
        assert!(id.matmul(xv).unwrap().value().bitwise_eq(&x));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let g = Graph::new();
        let x = g.param(m(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let grads = g.backward(x.sum().unwrap()).unwrap();
        assert_eq!(grads.of(x), Tensor::ones(&[2, 2]));
    }

    #[test]
    fn quadratic_gradient_is_twice_input() {
        let g = Graph::new();
        let x = g.param(m(&[vec![1.0, -2.0, 0.5]]));
        let loss = x.frobenius(x).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.of(x), m(&[vec![2.0, -4.0, 1.0]]));
    }

    #[test]
    fn unused_leaf_gets_exact_zero() {
        let g = Graph::new();
        let x = g.param(Tensor::ones(&[2, 2]));
        let unused = g.param(Tensor::ones(&[3, 1]));
        let grads = g.backward(x.mean().unwrap()).unwrap();
        assert_eq!(grads.of(unused), Tensor::zeros(&[3, 1]));
    }

    #[test]
    fn backward_rejects_bad_losses() {
        let g = Graph::new();
        let x = g.param(Tensor::ones(&[2, 2]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
        let c = g.constant(Tensor::ones(&[2, 2])).sum().unwrap();
        assert!(matches!(g.backward(c), Err(Error::DetachedLoss)));
        let other = Graph::new();
        let y = other.param(Tensor::scalar(1.0));
        assert!(matches!(g.backward(y), Err(Error::DetachedLoss)));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let g = Graph::new();
        let a = g.constant(Tensor::ones(&[2, 3]));
        let b = g.constant(Tensor::ones(&[2, 3]));
        let err = a.matmul(b).unwrap_err();
        assert!(err.to_string().contains("matmul"));
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let g = Graph::new();
        let a = g.constant(Tensor::scalar(1.0));
        let z = g.constant(Tensor::scalar(0.0));
        assert!(matches!(a.div(z), Err(Error::NonFinite { op: "div" })));
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let g = Graph::new();
        let x = g.constant(m(&[vec![1000.0, -1000.0, 3.0], vec![0.1, 0.2, 0.3]]));
        let y = x.softmax().unwrap().value();
        for r in 0..2 {
            assert!((y.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
        assert!(y.row(1).iter().all(|&p| p > 0.0));
    }

    #[test]
    fn mixed_graph_operands_rejected() {
        let g1 = Graph::new();
        let g2 = Graph::new();
        let a = g1.constant(Tensor::ones(&[1, 1]));
        let b = g2.constant(Tensor::ones(&[1, 1]));
        assert!(matches!(a.add(b), Err(Error::GraphMismatch)));
    }
}
