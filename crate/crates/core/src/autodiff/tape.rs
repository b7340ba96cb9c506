//! Define-by-run tape with reverse-mode gradients.
//!
//! Every operation on a [`Var`] appends a node to its [`Tape`]. Nodes whose
//! inputs do not require gradients are stored as constants, so inference runs
//! keep no backward bookkeeping. Leaves created with [`Tape::leaf`] accumulate
//! gradients across calls to [`Tape::backward`] until [`Tape::zero_grads`].

use std::cell::RefCell;

use super::tensor::{gemm_acc, gemm_at_acc, gemm_bt_acc, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MulScalarVar { tensor: usize, scalar: usize },
    AddScalarVar { tensor: usize, scalar: usize },
    Matmul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Concat { inputs: Vec<usize>, axis: usize },
    Slice { input: usize, axis: usize, start: usize },
    RepeatRows(usize),
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Softmax(usize),
    Sum(usize),
    Mean(usize),
    Clamp { input: usize, lo: f64, hi: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Ordered record of executed operations. Inputs always precede outputs.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a non-differentiable input.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        let nodes = self.nodes.borrow();
        let node = &nodes[var.id];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grads(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn unary(&self, a: usize, f: impl FnOnce(&Tensor) -> Tensor, op: Op) -> Var<'_> {
        let value = f(&self.nodes.borrow()[a].value);
        let rg = self.requires(&[a]);
        self.push(value, op, rg)
    }

    /// Propagates `∂loss/∂node` back through the tape, adding into every
    /// differentiable leaf's gradient buffer.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        assert!(std::ptr::eq(loss.tape, self), "variable from another tape");
        let mut leaf_updates: Vec<(usize, Vec<f64>)> = Vec::new();
        {
            let nodes = self.nodes.borrow();
            let root = &nodes[loss.id];
            if root.value.len() != 1 {
                return Err(Error::NotScalar(root.value.shape().to_vec()));
            }
            if !root.requires_grad {
                return Ok(());
            }
            let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
            grads[loss.id] = Some(vec![1.0]);

            for i in (0..=loss.id).rev() {
                let Some(g) = grads[i].take() else { continue };
                let node = &nodes[i];
                backprop_node(&nodes, node, i, &g, &mut grads, &mut leaf_updates);
            }
        }
        let mut nodes = self.nodes.borrow_mut();
        for (id, g) in leaf_updates {
            match &mut nodes[id].grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }
}

fn slot<'g>(
    nodes: &[Node],
    grads: &'g mut [Option<Vec<f64>>],
    j: usize,
) -> Option<&'g mut Vec<f64>> {
    if !nodes[j].requires_grad {
        return None;
    }
    let len = nodes[j].value.len();
    Some(grads[j].get_or_insert_with(|| vec![0.0; len]))
}

fn backprop_node(
    nodes: &[Node],
    node: &Node,
    i: usize,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
    leaf_updates: &mut Vec<(usize, Vec<f64>)>,
) {
    let y = node.value.data();
    match &node.op {
        Op::Leaf => {
            if node.requires_grad {
                leaf_updates.push((i, g.to_vec()));
            }
        }
        Op::Add(a, b) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, d)| *x += d);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                gb.iter_mut().zip(g).for_each(|(x, d)| *x += d);
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, d)| *x += d);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                gb.iter_mut().zip(g).for_each(|(x, d)| *x -= d);
            }
        }
        Op::Mul(a, b) => {
            let va = nodes[*a].value.data();
            let vb = nodes[*b].value.data();
            if let Some(ga) = slot(nodes, grads, *a) {
                for k in 0..g.len() {
                    ga[k] += g[k] * vb[k];
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for k in 0..g.len() {
                    gb[k] += g[k] * va[k];
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, d)| *x += c * d);
            }
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, d)| *x += d);
            }
        }
        Op::MulScalarVar { tensor, scalar } => {
            let vt = nodes[*tensor].value.data();
            let s = nodes[*scalar].value.item();
            if let Some(gt) = slot(nodes, grads, *tensor) {
                gt.iter_mut().zip(g).for_each(|(x, d)| *x += s * d);
            }
            if let Some(gs) = slot(nodes, grads, *scalar) {
                gs[0] += g.iter().zip(vt).map(|(d, t)| d * t).sum::<f64>();
            }
        }
        Op::AddScalarVar { tensor, scalar } => {
            if let Some(gt) = slot(nodes, grads, *tensor) {
                gt.iter_mut().zip(g).for_each(|(x, d)| *x += d);
            }
            if let Some(gs) = slot(nodes, grads, *scalar) {
                gs[0] += g.iter().sum::<f64>();
            }
        }
        Op::Matmul(a, b) => {
            let ta = &nodes[*a].value;
            let tb = &nodes[*b].value;
            let (m, k) = (ta.shape()[0], ta.shape()[1]);
            let n = tb.shape()[1];
            if let Some(ga) = slot(nodes, grads, *a) {
                gemm_bt_acc(g, tb.data(), ga, m, n, k);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                gemm_at_acc(ta.data(), g, gb, m, k, n);
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (nodes[*a].value.shape()[0], nodes[*a].value.shape()[1]);
            if let Some(ga) = slot(nodes, grads, *a) {
                for p in 0..r {
                    for q in 0..c {
                        ga[p * c + q] += g[q * r + p];
                    }
                }
            }
        }
        Op::Concat { inputs, axis } => {
            if *axis == 0 {
                let mut offset = 0;
                for &inp in inputs {
                    let len = nodes[inp].value.len();
                    if let Some(gi) = slot(nodes, grads, inp) {
                        gi.iter_mut()
                            .zip(&g[offset..offset + len])
                            .for_each(|(x, d)| *x += d);
                    }
                    offset += len;
                }
            } else {
                let rows = node.value.shape()[0];
                let total = node.value.shape()[1];
                let mut col0 = 0;
                for &inp in inputs {
                    let c = nodes[inp].value.shape()[1];
                    if let Some(gi) = slot(nodes, grads, inp) {
                        for r in 0..rows {
                            for q in 0..c {
                                gi[r * c + q] += g[r * total + col0 + q];
                            }
                        }
                    }
                    col0 += c;
                }
            }
        }
        Op::Slice { input, axis, start } => {
            let in_shape = nodes[*input].value.shape().to_vec();
            if let Some(gi) = slot(nodes, grads, *input) {
                if *axis == 0 {
                    let row = if in_shape.len() == 2 { in_shape[1] } else { 1 };
                    let off = start * row;
                    gi[off..off + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(x, d)| *x += d);
                } else {
                    let (rows, cols) = (in_shape[0], in_shape[1]);
                    let w = node.value.shape()[1];
                    for r in 0..rows {
                        for q in 0..w {
                            gi[r * cols + start + q] += g[r * w + q];
                        }
                    }
                }
            }
        }
        Op::RepeatRows(a) => {
            let c = nodes[*a].value.len();
            if let Some(ga) = slot(nodes, grads, *a) {
                for chunk in g.chunks(c) {
                    ga.iter_mut().zip(chunk).for_each(|(x, d)| *x += d);
                }
            }
        }
        Op::Tanh(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for k in 0..g.len() {
                    ga[k] += g[k] * (1.0 - y[k] * y[k]);
                }
            }
        }
        Op::Sigmoid(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for k in 0..g.len() {
                    ga[k] += g[k] * y[k] * (1.0 - y[k]);
                }
            }
        }
        Op::Exp(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for k in 0..g.len() {
                    ga[k] += g[k] * y[k];
                }
            }
        }
        Op::Log(a) => {
            let x = nodes[*a].value.data();
            if let Some(ga) = slot(nodes, grads, *a) {
                for k in 0..g.len() {
                    ga[k] += g[k] / x[k];
                }
            }
        }
        Op::Softmax(a) => {
            let width = node.value.cols();
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((gr, yr), gar) in g
                    .chunks(width)
                    .zip(y.chunks(width))
                    .zip(ga.chunks_mut(width))
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(d, v)| d * v).sum();
                    for q in 0..width {
                        gar[q] += yr[q] * (gr[q] - dot);
                    }
                }
            }
        }
        Op::Sum(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
        }
        Op::Mean(a) => {
            let n = nodes[*a].value.len() as f64;
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().for_each(|x| *x += g[0] / n);
            }
        }
        Op::Clamp { input, lo, hi } => {
            let x = nodes[*input].value.data();
            if let Some(gi) = slot(nodes, grads, *input) {
                for k in 0..g.len() {
                    if x[k] >= *lo && x[k] <= *hi {
                        gi[k] += g[k];
                    }
                }
            }
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(a.shape().to_vec(), a.data().iter().map(|x| f(*x)).collect()).expect("shape")
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.data()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad(*self)
    }

    fn check_tape(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "variables from different tapes"
        );
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        self.check_tape(&other);
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            same_shape(name, a, b)?;
            zip_map(a, b, f)
        };
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(value, op, rg))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |x, y| x + y, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |x, y| x - y, Op::Sub(self.id, other.id))
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |x, y| x * y, Op::Mul(self.id, other.id))
    }

    pub fn square(self) -> Var<'t> {
        self.mul(self).expect("same shape")
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.tape.unary(self.id, |a| map(a, |x| c * x), Op::Scale(self.id, c))
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.tape.unary(self.id, |a| map(a, |x| x + c), Op::AddScalar(self.id))
    }

    /// `1 - x`.
    pub fn one_minus(self) -> Var<'t> {
        self.neg().add_scalar(1.0)
    }

    fn scalar_var(
        self,
        scalar: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        self.check_tape(&scalar);
        let value = {
            let nodes = self.tape.nodes.borrow();
            let s = &nodes[scalar.id].value;
            if s.len() != 1 {
                return Err(Error::shape(name, nodes[self.id].value.shape(), s.shape()));
            }
            let s = s.item();
            map(&nodes[self.id].value, |x| f(x, s))
        };
        let rg = self.tape.requires(&[self.id, scalar.id]);
        Ok(self.tape.push(value, op, rg))
    }

    /// Multiplies every element by a single-element variable.
    pub fn mul_scalar(self, scalar: Var<'t>) -> Result<Var<'t>> {
        let op = Op::MulScalarVar {
            tensor: self.id,
            scalar: scalar.id,
        };
        self.scalar_var(scalar, "mul_scalar", |x, s| x * s, op)
    }

    /// Adds a single-element variable to every element.
    pub fn add_scalar_var(self, scalar: Var<'t>) -> Result<Var<'t>> {
        let op = Op::AddScalarVar {
            tensor: self.id,
            scalar: scalar.id,
        };
        self.scalar_var(scalar, "add_scalar_var", |x, s| x + s, op)
    }

    /// Matrix product of two rank-2 variables.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_tape(&other);
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(Error::shape("matmul", a.shape(), b.shape()));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut out = vec![0.0; m * n];
            gemm_acc(a.data(), b.data(), &mut out, m, k, n);
            Tensor::new(vec![m, n], out).expect("shape")
        };
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(value, Op::Matmul(self.id, other.id), rg))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            if a.rank() != 2 {
                return Err(Error::shape("transpose", a.shape(), &[]));
            }
            let (r, c) = (a.shape()[0], a.shape()[1]);
            let mut out = vec![0.0; r * c];
            for p in 0..r {
                for q in 0..c {
                    out[q * r + p] = a.data()[p * c + q];
                }
            }
            Tensor::new(vec![c, r], out).expect("shape")
        };
        let rg = self.tape.requires(&[self.id]);
        Ok(self.tape.push(value, Op::Transpose(self.id), rg))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.tape.nodes.borrow()[self.id]
            .value
            .clone()
            .reshaped(shape)?;
        let rg = self.tape.requires(&[self.id]);
        Ok(self.tape.push(value, Op::Reshape(self.id), rg))
    }

    /// Concatenates along `axis` (0 for rank 1; 0 or 1 for rank 2).
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or(Error::EmptySequence)?;
        let tape = first.tape;
        parts.iter().for_each(|p| first.check_tape(p));
        let value = {
            let nodes = tape.nodes.borrow();
            let base = nodes[first.id].value.shape().to_vec();
            let rank = base.len();
            if axis >= rank.max(1) || rank > 2 || (rank == 0) {
                return Err(Error::shape("concat", &base, &[axis]));
            }
            let mut data = Vec::new();
            if axis == 0 {
                let mut rows = 0;
                for p in parts {
                    let t = &nodes[p.id].value;
                    if t.rank() != rank || t.shape()[1..] != base[1..] {
                        return Err(Error::shape("concat", &base, t.shape()));
                    }
                    rows += t.shape()[0];
                    data.extend_from_slice(t.data());
                }
                let mut shape = base.clone();
                shape[0] = rows;
                Tensor::new(shape, data)?
            } else {
                let rows = base[0];
                let mut total = 0;
                for p in parts {
                    let t = &nodes[p.id].value;
                    if t.rank() != 2 || t.shape()[0] != rows {
                        return Err(Error::shape("concat", &base, t.shape()));
                    }
                    total += t.shape()[1];
                }
                data.reserve(rows * total);
                for r in 0..rows {
                    for p in parts {
                        data.extend_from_slice(nodes[p.id].value.row_slice(r));
                    }
                }
                Tensor::new(vec![rows, total], data)?
            }
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = tape.requires(&ids);
        Ok(tape.push(value, Op::Concat { inputs: ids, axis }, rg))
    }

    /// Half-open range `[start, end)` along `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let shape = a.shape();
            let bad = || Error::shape("slice", shape, &[axis, start, end]);
            if a.rank() == 0 || a.rank() > 2 || axis >= a.rank() || start > end {
                return Err(bad());
            }
            if end > shape[axis] {
                return Err(bad());
            }
            if axis == 0 {
                let row = if a.rank() == 2 { shape[1] } else { 1 };
                let data = a.data()[start * row..end * row].to_vec();
                let mut s = shape.to_vec();
                s[0] = end - start;
                Tensor::new(s, data)?
            } else {
                let (rows, cols) = (shape[0], shape[1]);
                let mut data = Vec::with_capacity(rows * (end - start));
                for r in 0..rows {
                    data.extend_from_slice(&a.data()[r * cols + start..r * cols + end]);
                }
                Tensor::new(vec![rows, end - start], data)?
            }
        };
        let rg = self.tape.requires(&[self.id]);
        let op = Op::Slice {
            input: self.id,
            axis,
            start,
        };
        Ok(self.tape.push(value, op, rg))
    }

    /// Tiles a `[1, c]` row into `[n, c]`.
    pub fn repeat_rows(self, n: usize) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            if a.rank() != 2 || a.shape()[0] != 1 {
                return Err(Error::shape("repeat_rows", a.shape(), &[1, a.cols()]));
            }
            let c = a.shape()[1];
            let mut data = Vec::with_capacity(n * c);
            for _ in 0..n {
                data.extend_from_slice(a.data());
            }
            Tensor::new(vec![n, c], data)?
        };
        let rg = self.tape.requires(&[self.id]);
        Ok(self.tape.push(value, Op::RepeatRows(self.id), rg))
    }

    pub fn tanh(self) -> Var<'t> {
        self.tape.unary(self.id, |a| map(a, f64::tanh), Op::Tanh(self.id))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.tape.unary(self.id, |a| map(a, sigmoid), Op::Sigmoid(self.id))
    }

    pub fn exp(self) -> Var<'t> {
        self.tape.unary(self.id, |a| map(a, f64::exp), Op::Exp(self.id))
    }

    pub fn ln(self) -> Var<'t> {
        self.tape.unary(self.id, |a| map(a, f64::ln), Op::Log(self.id))
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Var<'t> {
        let f = |a: &Tensor| {
            let width = a.cols().max(1);
            let mut out = Vec::with_capacity(a.len());
            for row in a.data().chunks(width) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let start = out.len();
                let mut z = 0.0;
                for v in row {
                    let e = (v - m).exp();
                    z += e;
                    out.push(e);
                }
                out[start..].iter_mut().for_each(|e| *e /= z);
            }
            Tensor::new(a.shape().to_vec(), out).expect("shape")
        };
        self.tape.unary(self.id, f, Op::Softmax(self.id))
    }

    pub fn sum(self) -> Var<'t> {
        self.tape.unary(
            self.id,
            |a| Tensor::scalar(a.data().iter().sum()),
            Op::Sum(self.id),
        )
    }

    pub fn mean(self) -> Var<'t> {
        self.tape.unary(
            self.id,
            |a| Tensor::scalar(a.data().iter().sum::<f64>() / a.len() as f64),
            Op::Mean(self.id),
        )
    }

    /// Elementwise clamp; gradient passes where `lo <= x <= hi`.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.tape.unary(
            self.id,
            |a| map(a, |x| x.clamp(lo, hi)),
            Op::Clamp {
                input: self.id,
                lo,
                hi,
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 1]));
        assert_eq!(a.matmul(b).unwrap().shape(), vec![2, 1]);
        let err = b.matmul(b).unwrap_err().to_string();
        assert!(err.contains("[3, 1]"), "{err}");
    }

    #[test]
    fn add_shape_mismatch_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 2]));
        let msg = a.add(b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn softmax_uniform_for_equal_logits() {
        let tape = Tape::new();
        for k in 1..10 {
            let x = tape.constant(Tensor::filled(&[k], 3.7));
            let y = x.softmax().value();
            assert!(y.data().iter().all(|v| close(*v, 1.0 / k as f64, 1e-15)));
        }
    }

    #[test]
    fn sum_backward_is_all_ones() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap());
        let loss = x.sum();
        tape.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn mean_of_squares_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let loss = x.square().mean();
        tape.backward(loss).unwrap();
        let g = x.grad().unwrap();
        let want = [2.0 / 3.0, 4.0 / 3.0, 2.0];
        for (a, b) in g.data().iter().zip(want) {
            assert!(close(*a, b, 1e-15));
        }
    }

    #[test]
    fn repeated_backward_accumulates() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.3, -0.7]));
        let loss = x.tanh().sum();
        tape.backward(loss).unwrap();
        let once = x.grad().unwrap();
        tape.backward(loss).unwrap();
        let twice = x.grad().unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert_eq!(2.0 * a, *b);
        }
        tape.zero_grads();
        assert!(x.grad().is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x.tanh()), Err(Error::NotScalar(_))));
    }

    #[test]
    fn constants_are_not_recorded_as_ops() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let y = x.tanh().sum();
        assert!(!y.requires_grad());
        tape.backward(y).unwrap();
    }

    #[test]
    fn concat_and_slice_roundtrip() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.leaf(Tensor::matrix(2, 1, vec![5.0, 6.0]).unwrap());
        let c = Var::concat(&[a, b], 1).unwrap();
        assert_eq!(c.value().data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let s = c.slice(1, 1, 3).unwrap();
        assert_eq!(s.value().data(), &[2.0, 5.0, 4.0, 6.0]);
        let r = c.slice(0, 1, 2).unwrap();
        assert_eq!(r.value().data(), &[3.0, 4.0, 6.0]);
        tape.backward(s.sum()).unwrap();
        assert_eq!(a.grad().unwrap().data(), &[0.0, 1.0, 0.0, 1.0]);
        assert_eq!(b.grad().unwrap().data(), &[1.0, 1.0]);
    }
}
