//! Reverse-mode differentiation over a recorded operation tape.
//!
//! Every forward pass records its operations on a fresh [`Tape`]. Calling
//! [`Tape::backward`] walks the tape in reverse and returns per-node
//! gradients, which [`Tape::accumulate`] folds into the [`ParamStore`]. The
//! tape is dropped afterwards.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, numel, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable tensor together with its gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter {
            name: name.into(),
            value,
            grad,
        }
    }
}

/// Ordered, named collection of parameters owned by one model instance.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.params.push(Parameter::new(name, value));
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Copies every value into another precision; gradients start at zero.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter::new(p.name.clone(), p.value.cast()))
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    Sigmoid,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    Scalar,
    /// The right operand matches the trailing axes of the left one.
    Trailing,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Binary(Binary, Var, Var, Broadcast),
    Unary(Unary, Var),
    Softmax { x: Var, axis: usize },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Pad2d(Var),
    Crop2d(Var),
    ScatterRows(Var, Rc<[usize]>),
    GatherRows(Var, Rc<[usize]>),
    Scale(Var, f64),
    Sum(Var),
    CrossEntropy { logits: Var, labels: Vec<usize> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    macs: u64,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one scalar with respect to every node of a tape.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            macs: 0,
        }
    }

    /// Multiply-accumulates executed by `matmul` on this tape so far.
    pub fn mac_count(&self) -> u64 {
        self.macs
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, needs_grad: bool) -> Var {
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

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Input leaf whose gradient is tracked (used by gradient checks).
    pub fn input_with_grad(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.get(id).value.clone(), Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = av.dims2("matmul")?;
        let (k2, n) = bv.dims2("matmul")?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(av.data(), bv.data(), &mut out, m, k, n);
        self.macs += (m * k * n) as u64;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), needs))
    }

    fn broadcast_kind(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(Broadcast::Same)
        } else if numel(sb) == 1 {
            Ok(Broadcast::Scalar)
        } else if !sb.is_empty() && sb.len() <= sa.len() && sa.ends_with(sb) {
            Ok(Broadcast::Trailing)
        } else {
            Err(Error::Dimension {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Mul => "mul",
        };
        let bc = self.broadcast_kind(name, a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let f = |x: T, y: T| match kind {
            Binary::Add => x + y,
            Binary::Mul => x * y,
        };
        let bd = bv.data();
        let data: Vec<T> = match bc {
            Broadcast::Same => av.data().iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Scalar => av.data().iter().map(|&x| f(x, bd[0])).collect(),
            Broadcast::Trailing => av
                .data()
                .chunks(bd.len())
                .flat_map(|row| row.iter().zip(bd).map(|(&x, &y)| f(x, y)))
                .collect(),
        };
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Binary(kind, a, b, bc), needs))
    }

    /// `a + b`; `b` may equal `a`'s shape, be a scalar, or match `a`'s
    /// trailing axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    /// Elementwise product with the same broadcasting rules as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn unary(&mut self, kind: Unary, x: Var) -> Var {
        let xv = self.value(x);
        let value = match kind {
            Unary::Tanh => xv.map(|v| v.tanh()),
            Unary::Sigmoid => xv.map(sigmoid),
            Unary::Relu => xv.map(|v| if v > T::zero() { v } else { T::zero() }),
        };
        let needs = self.needs(x);
        self.push(value, Op::Unary(kind, x), needs)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Unary::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = softmax(self.value(x), axis)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Softmax { x, axis }, needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Reshape(x), needs))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let value = self.value(x).permute(axes)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Permute(x, axes.to_vec()), needs))
    }

    pub fn pad2d(&mut self, x: Var, extra_rows: usize, extra_cols: usize) -> Result<Var> {
        let value = self.value(x).pad2d(extra_rows, extra_cols)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Pad2d(x), needs))
    }

    pub fn crop2d(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let value = self.value(x).crop2d(rows, cols)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Crop2d(x), needs))
    }

    pub fn scatter_rows(&mut self, x: Var, index: Rc<[usize]>, rows: usize) -> Result<Var> {
        let value = self.value(x).scatter_rows(&index, rows)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::ScatterRows(x, index), needs))
    }

    pub fn gather_rows(&mut self, x: Var, index: Rc<[usize]>) -> Result<Var> {
        let value = self.value(x).gather_rows(&index)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::GatherRows(x, index), needs))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let c = T::of(factor);
        let value = self.value(x).map(|v| v * c);
        let needs = self.needs(x);
        self.push(value, Op::Scale(x, factor), needs)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().fold(T::zero(), |a, &b| a + b);
        let needs = self.needs(x);
        self.push(Tensor::scalar(total), Op::Sum(x), needs)
    }

    /// Mean softmax cross-entropy of `[batch, classes]` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (b, k) = lv.dims2("cross_entropy")?;
        if labels.len() != b {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} labels for {} rows", labels.len(), b),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let mut total = T::zero();
        for (row, &label) in lv.data().chunks(k).zip(labels) {
            total = total + log_sum_exp(row) - row[label];
        }
        let loss = total / T::of(b as f64);
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            needs,
        ))
    }

    /// Gradients of the single-element node `loss` with respect to all nodes.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = av.dims2("matmul")?;
                let n = bv.shape()[1];
                if self.needs(*a) {
                    let mut da = vec![T::zero(); m * k];
                    matmul_nt_into(g.data(), bv.data(), &mut da, m, k, n);
                    accumulate(grads, *a, Tensor::new(vec![m, k], da)?);
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); k * n];
                    matmul_tn_into(av.data(), g.data(), &mut db, m, k, n);
                    accumulate(grads, *b, Tensor::new(vec![k, n], db)?);
                }
            }
            Op::Binary(kind, a, b, bc) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let da = match kind {
                        Binary::Add => g.clone(),
                        Binary::Mul => {
                            let bd = bv.data();
                            let data: Vec<T> = match bc {
                                Broadcast::Same => g.data().iter().zip(bd).map(|(&x, &y)| x * y).collect(),
                                Broadcast::Scalar => g.data().iter().map(|&x| x * bd[0]).collect(),
                                Broadcast::Trailing => g
                                    .data()
                                    .chunks(bd.len())
                                    .flat_map(|row| row.iter().zip(bd).map(|(&x, &y)| x * y))
                                    .collect(),
                            };
                            Tensor::new(g.shape().to_vec(), data)?
                        }
                    };
                    accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let full: Vec<T> = match kind {
                        Binary::Add => g.data().to_vec(),
                        Binary::Mul => g.data().iter().zip(av.data()).map(|(&x, &y)| x * y).collect(),
                    };
                    let db = match bc {
                        Broadcast::Same => full,
                        Broadcast::Scalar => vec![full.iter().fold(T::zero(), |s, &v| s + v)],
                        Broadcast::Trailing => {
                            let mut acc = vec![T::zero(); bv.len()];
                            for row in full.chunks(bv.len()) {
                                for (s, &v) in acc.iter_mut().zip(row) {
                                    *s = *s + v;
                                }
                            }
                            acc
                        }
                    };
                    accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), db)?);
                }
            }
            Op::Unary(kind, x) => {
                let y = node.value.data();
                let data: Vec<T> = g
                    .data()
                    .iter()
                    .zip(y)
                    .map(|(&gv, &yv)| match kind {
                        Unary::Tanh => gv * (T::one() - yv * yv),
                        Unary::Sigmoid => gv * yv * (T::one() - yv),
                        // Subgradient at exactly zero is zero.
                        Unary::Relu => {
                            if yv > T::zero() {
                                gv
                            } else {
                                T::zero()
                            }
                        }
                    })
                    .collect();
                accumulate(grads, *x, Tensor::new(g.shape().to_vec(), data)?);
            }
            Op::Softmax { x, axis } => {
                let y = &node.value;
                let (outer, len, inner) = axis_split(y.shape(), *axis);
                let (yd, gd) = (y.data(), g.data());
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot = (0..len).fold(T::zero(), |s, j| s + gd[at(j)] * yd[at(j)]);
                        for j in 0..len {
                            dx[at(j)] = yd[at(j)] * (gd[at(j)] - dot);
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(y.shape().to_vec(), dx)?);
            }
            Op::Reshape(x) => {
                accumulate(grads, *x, g.reshape(self.shape(*x))?);
            }
            Op::Permute(x, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                accumulate(grads, *x, g.permute(&inverse)?);
            }
            Op::Pad2d(x) => {
                let s = self.shape(*x);
                accumulate(grads, *x, g.crop2d(s[0], s[1])?);
            }
            Op::Crop2d(x) => {
                let s = self.shape(*x);
                let gs = g.shape();
                accumulate(grads, *x, g.pad2d(s[0] - gs[0], s[1] - gs[1])?);
            }
            Op::ScatterRows(x, index) => {
                accumulate(grads, *x, g.gather_rows(index)?);
            }
            Op::GatherRows(x, index) => {
                let s = self.shape(*x);
                let c = s[1];
                let mut dx = vec![T::zero(); s[0] * c];
                for (i, &src) in index.iter().enumerate() {
                    for (d, &v) in dx[src * c..(src + 1) * c].iter_mut().zip(&g.data()[i * c..(i + 1) * c]) {
                        *d = *d + v;
                    }
                }
                accumulate(grads, *x, Tensor::new(s.to_vec(), dx)?);
            }
            Op::Scale(x, factor) => {
                let c = T::of(*factor);
                accumulate(grads, *x, g.map(|v| v * c));
            }
            Op::Sum(x) => {
                accumulate(grads, *x, Tensor::full(self.shape(*x), g.item()));
            }
            Op::CrossEntropy { logits, labels } => {
                let lv = self.value(*logits);
                let k = lv.shape()[1];
                let scale = g.item() / T::of(labels.len() as f64);
                let mut dx = Vec::with_capacity(lv.len());
                for (row, &label) in lv.data().chunks(k).zip(labels) {
                    let lse = log_sum_exp(row);
                    for (j, &v) in row.iter().enumerate() {
                        let p = (v - lse).exp();
                        let target = if j == label { T::one() } else { T::zero() };
                        dx.push((p - target) * scale);
                    }
                }
                accumulate(grads, *logits, Tensor::new(lv.shape().to_vec(), dx)?);
            }
        }
        Ok(())
    }

    /// Adds the gradients of every parameter node into the store.
    pub fn accumulate(&self, grads: &Grads<T>, store: &mut ParamStore<T>) {
        for (node, g) in self.nodes.iter().zip(&grads.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                let p = store.get_mut(*id);
                for (a, &b) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + b;
                }
            }
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, &b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a = *a + b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let sum = row.iter().fold(T::zero(), |s, &v| s + (v - max).exp());
    max + sum.ln()
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numerically stable softmax along `axis`.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(Error::shape(
            "softmax",
            format!("axis {axis} out of range for {:?}", x.shape()),
        ));
    }
    if x.shape()[axis] == 0 {
        return Err(Error::shape("softmax", "empty axis"));
    }
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let xd = x.data();
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let max = (0..len).fold(T::neg_infinity(), |m, j| m.max(xd[at(j)]));
            let mut sum = T::zero();
            for j in 0..len {
                let e = (xd[at(j)] - max).exp();
                out[at(j)] = e;
                sum = sum + e;
            }
            for j in 0..len {
                out[at(j)] = out[at(j)] / sum;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}
