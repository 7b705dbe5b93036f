//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation eagerly as it is applied. Nodes are
//! appended in creation order and only ever reference earlier nodes, so the
//! tape is acyclic and its index order is a topological order; `backward`
//! walks it once in reverse.
//!
//! Leaves either borrow their tensor (`param`, `constant_ref`) or own it
//! (`param_owned`, `input`). Only leaves created through `param*` collect
//! gradients; a node needs a gradient iff some ancestor is such a leaf.

use alloc::borrow::Cow;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::shape_err;
use crate::math;
use crate::tensor::{gemm_acc, linear_forward, Tensor};
use crate::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
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
    Neg(Var),
    Scale(Var, f64),
    AddConst(Var),
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Sum(Var),
    Mean(Var),
    Clip { a: Var, lo: f64, hi: f64 },
    Minimum(Var, Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { a: Var, start: usize },
    SumCols(Var),
    Broadcast(Var),
    Reshape(Var),
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// An eagerly built computation graph. Single-threaded; build a fresh graph
/// per forward pass.
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self { nodes: Vec::with_capacity(64) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'p, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn push_owned(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(Cow::Owned(value), op, rg)
    }

    /// Trainable leaf borrowing its value.
    pub fn param(&mut self, t: &'p Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, true)
    }

    /// Trainable leaf owning its value.
    pub fn param_owned(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, true)
    }

    /// Non-trainable leaf borrowing its value (e.g. frozen network weights).
    pub fn constant_ref(&mut self, t: &'p Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, false)
    }

    /// Non-trainable owned leaf.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.input(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a trainable leaf, if any backward pass
    /// reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradient of a trainable leaf, zeros when no backward pass reached it.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(self.shape(v)))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---------------------------------------------------------------- ops

    fn binary_shape(&self, a: Var, b: Var, name: &str) -> Result<Vec<usize>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() || tb.is_scalar() {
            Ok(ta.shape().to_vec())
        } else if ta.is_scalar() {
            Ok(tb.shape().to_vec())
        } else {
            Err(shape_err!("{name}: {:?} vs {:?}", ta.shape(), tb.shape()))
        }
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let shape = self.binary_shape(a, b, name)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let n: usize = shape.iter().product();
        let data = (0..n).map(|i| f(bval(ta, i), bval(tb, i))).collect();
        let out = Tensor::new(&shape, data)?;
        Ok(self.push_owned(out, op, &[a, b]))
    }

    /// Elementwise sum; either operand may be a one-element tensor.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", Op::Div(a, b), |x, y| x / y)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| -v);
        self.push_owned(out, Op::Neg(a), &[a])
    }

    /// `c · a` for a constant `c`.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| c * v);
        self.push_owned(out, Op::Scale(a, c), &[a])
    }

    /// `a + c` for a constant `c`.
    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v + c);
        self.push_owned(out, Op::AddConst(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a).expect("same shape")
    }

    /// Matrix product of `m×k` and `k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, k2, n) = match (sa, sb) {
            ([m, k], [k2, n]) => (*m, *k, *k2, *n),
            _ => return Err(shape_err!("matmul needs rank-2 operands, got {:?} and {:?}", sa, sb)),
        };
        if k != k2 {
            return Err(shape_err!("matmul inner dimensions {k} vs {k2}"));
        }
        let mut c = vec![0.0; m * n];
        gemm_acc(m, k, n, self.value(a).data(), k, 1, self.value(b).data(), n, 1, &mut c);
        let out = Tensor::new(&[m, n], c)?;
        Ok(self.push_owned(out, Op::MatMul(a, b), &[a, b]))
    }

    /// Affine map `x·wᵀ + b` with `x: rows×in`, `w: out×in`, `b: out`.
    /// A rank-1 `x` is one row; the result is always rank 2.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (rows, d_in) = self.value(x).as_matrix_dims()?;
        let (d_out, w_in) = match self.shape(w) {
            [o, i] => (*o, *i),
            s => return Err(shape_err!("linear weight must be rank 2, got {:?}", s)),
        };
        if w_in != d_in {
            return Err(shape_err!("linear expects input width {w_in}, got {d_in}"));
        }
        if let Some(bv) = b {
            if self.value(bv).numel() != d_out {
                return Err(shape_err!(
                    "linear bias has {} entries for {d_out} outputs",
                    self.value(bv).numel()
                ));
            }
        }
        let y = linear_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|bv| self.value(bv).data()),
            rows,
            d_in,
            d_out,
        );
        let out = Tensor::new(&[rows, d_out], y)?;
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push_owned(out, Op::Linear { x, w, b }, &parents))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(math::tanh);
        self.push_owned(out, Op::Tanh(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(math::exp);
        self.push_owned(out, Op::Exp(a), &[a])
    }

    /// Natural log; every input must be strictly positive.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(v) = self.value(a).data().iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::Domain(alloc::format!("log of non-positive value {v}")));
        }
        let out = self.value(a).map(math::log);
        Ok(self.push_owned(out, Op::Log(a), &[a]))
    }

    /// ln(1 + eᵃ).
    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(math::softplus);
        self.push_owned(out, Op::Softplus(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push_owned(out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::scalar(t.sum() / t.numel() as f64);
        self.push_owned(out, Op::Mean(a), &[a])
    }

    /// Elementwise clamp to `[lo, hi]`. Gradient passes where
    /// `lo <= a <= hi` (boundaries count as interior) and is zero outside.
    pub fn clip(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if !(lo < hi) {
            return Err(Error::Parameter(alloc::format!("clip bounds need lo < hi, got [{lo}, {hi}]")));
        }
        let out = self.value(a).map(|v| v.clamp(lo, hi));
        Ok(self.push_owned(out, Op::Clip { a, lo, hi }, &[a]))
    }

    /// Elementwise minimum. Gradient goes to the smaller operand; ties go
    /// to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!("minimum: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        self.binary(a, b, "minimum", Op::Minimum(a, b), |x, y| if x <= y { x } else { y })
    }

    /// Concatenate rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let dims: Vec<(usize, usize)> =
            parts.iter().map(|&p| self.value(p).as_matrix_dims()).collect::<Result<_>>()?;
        let rows = dims.first().ok_or_else(|| shape_err!("concat of nothing"))?.0;
        if dims.iter().any(|d| d.0 != rows) {
            return Err(shape_err!("concat_cols row mismatch {:?}", dims));
        }
        let cols: usize = dims.iter().map(|d| d.1).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for (&p, &(_, c)) in parts.iter().zip(&dims) {
                data.extend_from_slice(&self.value(p).data()[r * c..(r + 1) * c]);
            }
        }
        let out = Tensor::new(&[rows, cols], data)?;
        Ok(self.push_owned(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Stack rank-2 tensors with equal column counts along rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let dims: Vec<(usize, usize)> =
            parts.iter().map(|&p| self.value(p).as_matrix_dims()).collect::<Result<_>>()?;
        let cols = dims.first().ok_or_else(|| shape_err!("concat of nothing"))?.1;
        if dims.iter().any(|d| d.1 != cols) {
            return Err(shape_err!("concat_rows column mismatch {:?}", dims));
        }
        let rows: usize = dims.iter().map(|d| d.0).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(&[rows, cols], data)?;
        Ok(self.push_owned(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Columns `start..start + len` of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.value(a).as_matrix_dims()?;
        if len == 0 || start + len > cols {
            return Err(shape_err!("slice {start}..{} of {cols} columns", start + len));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let out = Tensor::new(&[rows, len], data)?;
        Ok(self.push_owned(out, Op::SliceCols { a, start }, &[a]))
    }

    /// Row sums: `rows×cols → rows×1`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.value(a).as_matrix_dims()?;
        let data = self.value(a).data().chunks_exact(cols).map(|r| r.iter().sum()).collect();
        let out = Tensor::new(&[rows, 1], data)?;
        Ok(self.push_owned(out, Op::SumCols(a), &[a]))
    }

    /// Broadcast a one-element tensor to any shape, or a row (`n` or `1×n`)
    /// to `rows×n`.
    pub fn broadcast(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = if t.is_scalar() {
            vec![t.item(); numel]
        } else {
            let n = t.numel();
            let row_like = matches!(t.shape(), [_] | [1, _]);
            if !row_like || shape.last() != Some(&n) {
                return Err(shape_err!("cannot broadcast {:?} to {:?}", t.shape(), shape));
            }
            t.data().iter().copied().cycle().take(numel).collect()
        };
        let out = Tensor::new(shape, data)?;
        Ok(self.push_owned(out, Op::Broadcast(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshaped(shape)?;
        Ok(self.push_owned(out, Op::Reshape(a), &[a]))
    }

    // ----------------------------------------------------------- backward

    /// Backpropagate from a one-element `loss`, adding `∂loss/∂leaf` into
    /// the gradient of every trainable leaf it depends on. Gradients
    /// accumulate across calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(shape_err!("backward needs a scalar loss, got {:?}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            if let Op::Leaf = op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.add_assign(&g),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.propagate(i, &op, &g, &mut grads);
        }
        Ok(())
    }

    fn send(&self, grads: &mut [Option<Tensor>], to: Var, g: Tensor) {
        if !self.nodes[to.0].requires_grad {
            return;
        }
        debug_assert_eq!(g.numel(), self.value(to).numel());
        match &mut grads[to.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    /// Gradient for operand `to` of a broadcasting elementwise op, given the
    /// per-output-element partials.
    fn send_elementwise(&self, grads: &mut [Option<Tensor>], to: Var, partial: Vec<f64>) {
        if !self.nodes[to.0].requires_grad {
            return;
        }
        let target = self.value(to);
        let g = if target.numel() == partial.len() {
            Tensor::new(target.shape(), partial).expect("same numel")
        } else {
            Tensor::new(target.shape(), vec![partial.iter().sum()]).expect("scalar")
        };
        self.send(grads, to, g);
    }

    fn propagate(&self, i: usize, op: &Op, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[i].value;
        let gd = g.data();
        let n = gd.len();
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.send_elementwise(grads, a, gd.to_vec());
                self.send_elementwise(grads, b, gd.to_vec());
            }
            Op::Sub(a, b) => {
                self.send_elementwise(grads, a, gd.to_vec());
                self.send_elementwise(grads, b, gd.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                if self.requires_grad(a) {
                    let p = (0..n).map(|k| gd[k] * bval(tb, k)).collect();
                    self.send_elementwise(grads, a, p);
                }
                if self.requires_grad(b) {
                    let p = (0..n).map(|k| gd[k] * bval(ta, k)).collect();
                    self.send_elementwise(grads, b, p);
                }
            }
            Op::Div(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                if self.requires_grad(a) {
                    let p = (0..n).map(|k| gd[k] / bval(tb, k)).collect();
                    self.send_elementwise(grads, a, p);
                }
                if self.requires_grad(b) {
                    let p = (0..n)
                        .map(|k| {
                            let d = bval(tb, k);
                            -gd[k] * bval(ta, k) / (d * d)
                        })
                        .collect();
                    self.send_elementwise(grads, b, p);
                }
            }
            Op::Neg(a) => self.send(grads, a, g.map(|v| -v)),
            Op::Scale(a, c) => self.send(grads, a, g.map(|v| c * v)),
            Op::AddConst(a) | Op::Reshape(a) => {
                let shape = self.shape(a);
                self.send(grads, a, g.reshaped(shape).expect("same numel"));
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let nn = self.shape(b)[1];
                if self.requires_grad(a) {
                    let mut da = vec![0.0; m * k];
                    gemm_acc(m, nn, k, gd, nn, 1, self.value(b).data(), 1, nn, &mut da);
                    self.send(grads, a, Tensor::new(&[m, k], da).expect("shape"));
                }
                if self.requires_grad(b) {
                    let mut db = vec![0.0; k * nn];
                    gemm_acc(k, m, nn, self.value(a).data(), 1, k, gd, nn, 1, &mut db);
                    self.send(grads, b, Tensor::new(&[k, nn], db).expect("shape"));
                }
            }
            Op::Linear { x, w, b } => {
                let (rows, d_in) = self.value(x).as_matrix_dims().expect("checked");
                let d_out = self.shape(w)[0];
                if self.requires_grad(x) {
                    let mut dx = vec![0.0; rows * d_in];
                    gemm_acc(rows, d_out, d_in, gd, d_out, 1, self.value(w).data(), d_in, 1, &mut dx);
                    let shape = self.shape(x);
                    self.send(grads, x, Tensor::new(shape, dx).expect("shape"));
                }
                if self.requires_grad(w) {
                    let mut dw = vec![0.0; d_out * d_in];
                    gemm_acc(d_out, rows, d_in, gd, 1, d_out, self.value(x).data(), d_in, 1, &mut dw);
                    self.send(grads, w, Tensor::new(&[d_out, d_in], dw).expect("shape"));
                }
                if let Some(b) = b {
                    if self.requires_grad(b) {
                        let mut db = vec![0.0; d_out];
                        for row in gd.chunks_exact(d_out) {
                            for (acc, v) in db.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        let shape = self.shape(b);
                        self.send(grads, b, Tensor::new(shape, db).expect("shape"));
                    }
                }
            }
            Op::Tanh(a) => {
                let p = out.data().iter().zip(gd).map(|(y, g)| g * (1.0 - y * y)).collect();
                self.send(grads, a, Tensor::new(self.shape(a), p).expect("shape"));
            }
            Op::Exp(a) => {
                let p = out.data().iter().zip(gd).map(|(y, g)| g * y).collect();
                self.send(grads, a, Tensor::new(self.shape(a), p).expect("shape"));
            }
            Op::Log(a) => {
                let p = self.value(a).data().iter().zip(gd).map(|(x, g)| g / x).collect();
                self.send(grads, a, Tensor::new(self.shape(a), p).expect("shape"));
            }
            Op::Softplus(a) => {
                let p = self.value(a).data().iter().zip(gd).map(|(x, g)| g * math::sigmoid(*x)).collect();
                self.send(grads, a, Tensor::new(self.shape(a), p).expect("shape"));
            }
            Op::Sum(a) => {
                self.send(grads, a, Tensor::full(self.shape(a), gd[0]));
            }
            Op::Mean(a) => {
                let cnt = self.value(a).numel() as f64;
                self.send(grads, a, Tensor::full(self.shape(a), gd[0] / cnt));
            }
            Op::Clip { a, lo, hi } => {
                let p = self
                    .value(a)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(x, g)| if *x >= lo && *x <= hi { *g } else { 0.0 })
                    .collect();
                self.send(grads, a, Tensor::new(self.shape(a), p).expect("shape"));
            }
            Op::Minimum(a, b) => {
                let (ta, tb) = (self.value(a).data(), self.value(b).data());
                let first: Vec<bool> = ta.iter().zip(tb).map(|(x, y)| x <= y).collect();
                let pa = gd.iter().zip(&first).map(|(g, &f)| if f { *g } else { 0.0 }).collect();
                let pb = gd.iter().zip(&first).map(|(g, &f)| if f { 0.0 } else { *g }).collect();
                self.send(grads, a, Tensor::new(self.shape(a), pa).expect("shape"));
                self.send(grads, b, Tensor::new(self.shape(b), pb).expect("shape"));
            }
            Op::ConcatCols(ref parts) => {
                let (rows, cols) = out.as_matrix_dims().expect("rank 2");
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).as_matrix_dims().expect("checked").1;
                    if self.requires_grad(p) {
                        let mut d = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            d.extend_from_slice(&gd[r * cols + offset..r * cols + offset + c]);
                        }
                        self.send(grads, p, Tensor::new(self.shape(p), d).expect("shape"));
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(ref parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if self.requires_grad(p) {
                        let d = gd[offset..offset + len].to_vec();
                        self.send(grads, p, Tensor::new(self.shape(p), d).expect("shape"));
                    }
                    offset += len;
                }
            }
            Op::SliceCols { a, start } => {
                let (rows, cols) = self.value(a).as_matrix_dims().expect("checked");
                let len = out.shape()[1];
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    d[r * cols + start..r * cols + start + len].copy_from_slice(&gd[r * len..(r + 1) * len]);
                }
                self.send(grads, a, Tensor::new(self.shape(a), d).expect("shape"));
            }
            Op::SumCols(a) => {
                let (rows, cols) = self.value(a).as_matrix_dims().expect("checked");
                let mut d = Vec::with_capacity(rows * cols);
                for &gr in gd {
                    d.extend(core::iter::repeat_n(gr, cols));
                }
                self.send(grads, a, Tensor::new(self.shape(a), d).expect("shape"));
            }
            Op::Broadcast(a) => {
                let src = self.value(a);
                let d = if src.is_scalar() {
                    vec![gd.iter().sum()]
                } else {
                    let k = src.numel();
                    let mut acc = vec![0.0; k];
                    for row in gd.chunks_exact(k) {
                        for (s, v) in acc.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    acc
                };
                self.send(grads, a, Tensor::new(src.shape(), d).expect("shape"));
            }
        }
    }
}

#[inline]
fn bval(t: &Tensor, i: usize) -> f64 {
    let d = t.data();
    if d.len() == 1 {
        d[0]
    } else {
        d[i]
    }
}

/// Register `params` as leaves, trainable or frozen, in order.
pub fn bind_params<'p>(g: &mut Graph<'p>, params: Vec<&'p Tensor>, trainable: bool) -> Vec<Var> {
    params
        .into_iter()
        .map(|t| if trainable { g.param(t) } else { g.constant_ref(t) })
        .collect()
}

/// Hands out bound parameter handles in the order a module lists them.
pub struct VarCursor<'a> {
    vars: &'a [Var],
    pos: usize,
}

impl<'a> VarCursor<'a> {
    pub fn new(vars: &'a [Var]) -> Self {
        Self { vars, pos: 0 }
    }

    pub fn next_var(&mut self) -> Result<Var> {
        let v = self
            .vars
            .get(self.pos)
            .copied()
            .ok_or_else(|| shape_err!("ran out of bound parameters after {}", self.pos))?;
        self.pos += 1;
        Ok(v)
    }

    /// Errors unless every handle was consumed.
    pub fn finish(self) -> Result<()> {
        if self.pos == self.vars.len() {
            Ok(())
        } else {
            Err(shape_err!("{} bound parameters, {} used", self.vars.len(), self.pos))
        }
    }
}

/// Central-difference step used by [`grad_check`].
pub const GRAD_CHECK_STEP: f64 = 1e-6;

/// Per-component outcome of a finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `(analytic, numeric)` for every scalar parameter, in order.
    pub components: Vec<(f64, f64)>,
}

impl GradCheckReport {
    /// `max |a − n| / max(1e-8, |a| + |n|)`.
    pub fn max_rel_error(&self) -> f64 {
        self.components.iter().map(|&(a, n)| rel_error(a, n)).fold(0.0, f64::max)
    }

    pub fn max_abs_error(&self) -> f64 {
        self.components.iter().map(|&(a, n)| libm::fabs(a - n)).fold(0.0, f64::max)
    }

    /// Number of components whose relative error exceeds `tol`.
    pub fn count_above(&self, tol: f64) -> usize {
        self.components.iter().filter(|&&(a, n)| rel_error(a, n) > tol).count()
    }

    /// Relative error over components with `|a| + |n| ≥ floor` only.
    pub fn max_rel_error_above(&self, floor: f64) -> f64 {
        self.components
            .iter()
            .filter(|&&(a, n)| libm::fabs(a) + libm::fabs(n) >= floor)
            .map(|&(a, n)| rel_error(a, n))
            .fold(0.0, f64::max)
    }
}

fn rel_error(a: f64, n: f64) -> f64 {
    libm::fabs(a - n) / (libm::fabs(a) + libm::fabs(n)).max(1e-8)
}

/// Compare the analytic gradient of `f` at `params` against central finite
/// differences with step [`GRAD_CHECK_STEP`].
///
/// Returns `max |analytic − numeric| / max(1e-8, |analytic| + |numeric|)`
/// over every scalar parameter.
pub fn grad_check<F>(params: &[Tensor], f: F) -> Result<f64>
where
    F: for<'a> Fn(&mut Graph<'a>, &[Var]) -> Result<Var>,
{
    Ok(grad_check_report(params, f)?.max_rel_error())
}

/// [`grad_check`] keeping every analytic/numeric pair.
pub fn grad_check_report<F>(params: &[Tensor], f: F) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Graph<'a>, &[Var]) -> Result<Var>,
{
    let analytic: Vec<Tensor> = {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.param(p)).collect();
        let loss = f(&mut g, &vars)?;
        check_finite(g.value(loss).item())?;
        g.backward(loss)?;
        vars.iter().map(|&v| g.grad_or_zeros(v)).collect()
    };

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.constant_ref(p)).collect();
        let loss = f(&mut g, &vars)?;
        if !g.value(loss).is_scalar() {
            return Err(shape_err!("grad_check function must return a scalar"));
        }
        check_finite(g.value(loss).item())
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut components = Vec::with_capacity(params.iter().map(Tensor::numel).sum());
    for t in 0..work.len() {
        for k in 0..work[t].numel() {
            let x0 = work[t].data()[k];
            let (xp, xm) = (x0 + GRAD_CHECK_STEP, x0 - GRAD_CHECK_STEP);
            work[t].data_mut()[k] = xp;
            let fp = eval(&work)?;
            work[t].data_mut()[k] = xm;
            let fm = eval(&work)?;
            work[t].data_mut()[k] = x0;
            components.push((analytic[t].data()[k], (fp - fm) / (xp - xm)));
        }
    }
    Ok(GradCheckReport { components })
}

fn check_finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(alloc::format!("non-finite function value {v}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::vector(v)
    }

    #[test]
    fn mul_values_and_product_rule() {
        let (a, b) = (t(&[2.0, 3.0]), t(&[4.0, 5.0]));
        let mut g = Graph::new();
        let (va, vb) = (g.param(&a), g.param(&b));
        let y = g.mul(va, vb).unwrap();
        assert_eq!(g.value(y).data(), &[8.0, 15.0]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(va).unwrap().data(), &[4.0, 5.0]);
        assert_eq!(g.grad(vb).unwrap().data(), &[2.0, 3.0]);
    }

    #[test]
    fn add_zero_is_identity() {
        let x = t(&[1.5, -2.0, 0.25]);
        let mut g = Graph::new();
        let vx = g.param(&x);
        let zero = g.scalar(0.0);
        let y = g.add(vx, zero).unwrap();
        assert_eq!(g.value(y), &x);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(vx).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn div_self_has_zero_gradient() {
        let x = t(&[1.7]);
        let mut g = Graph::new();
        let vx = g.param(&x);
        let y = g.div(vx, vx).unwrap();
        assert_eq!(g.value(y).item(), 1.0);
        g.backward(y).unwrap();
        assert!(g.grad(vx).unwrap().item().abs() < 1e-15);
        let err = grad_check(&[x], |g, v| g.div(v[0], v[0])).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn shape_mismatch_is_error() {
        let mut g = Graph::new();
        let a = g.input(t(&[1.0, 2.0]));
        let b = g.input(t(&[1.0, 2.0, 3.0]));
        assert!(matches!(g.add(a, b), Err(Error::Shape(_))));
        assert!(matches!(g.minimum(a, b), Err(Error::Shape(_))));
        let m = g.input(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(m, m), Err(Error::Shape(_))));
    }

    #[test]
    fn matmul_examples() {
        let id = Tensor::new(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let b = Tensor::new(&[3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let mut g = Graph::new();
        let (vi, vb) = (g.input(id), g.input(b.clone()));
        let y = g.matmul(vi, vb).unwrap();
        assert_eq!(g.value(y), &b);

        let a = Tensor::matrix(&[&[1., 2.], &[3., 4.]]).unwrap();
        let c = Tensor::matrix(&[&[1.], &[1.]]).unwrap();
        let (va, vc) = (g.input(a), g.input(c));
        let y = g.matmul(va, vc).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 7.0]);
        assert_eq!(g.shape(y), &[2, 1]);
    }

    #[test]
    fn transcendental_examples() {
        let z = t(&[0.0]);
        let mut g = Graph::new();
        let vz = g.param(&z);
        let th = g.tanh(vz);
        let ex = g.exp(vz);
        assert_eq!(g.value(th).item(), 0.0);
        assert_eq!(g.value(ex).item(), 1.0);
        g.backward(th).unwrap();
        assert_eq!(g.grad(vz).unwrap().item(), 1.0);
        g.zero_grad();
        g.backward(ex).unwrap();
        assert_eq!(g.grad(vz).unwrap().item(), 1.0);
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut g = Graph::new();
        let a = g.input(t(&[1.0, 0.0]));
        assert!(matches!(g.log(a), Err(Error::Domain(_))));
        let b = g.input(t(&[-3.0]));
        assert!(matches!(g.log(b), Err(Error::Domain(_))));
    }

    #[test]
    fn reductions() {
        let x = t(&[1.0, 2.0, 3.0]);
        let mut g = Graph::new();
        let vx = g.param(&x);
        let m = g.mean(vx);
        assert_eq!(g.value(m).item(), 2.0);
        let s = g.sum(vx);
        g.backward(s).unwrap();
        assert_eq!(g.grad(vx).unwrap().data(), &[1.0; 3]);

        let y = t(&[4.0, 1.0, 2.0, 7.0]);
        let mut g = Graph::new();
        let vy = g.param(&y);
        let m = g.mean(vy);
        g.backward(m).unwrap();
        assert_eq!(g.grad(vy).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn clip_subgradient() {
        for (x, want, grad) in [(1.5, 1.2, 0.0), (1.0, 1.0, 1.0), (0.5, 0.8, 0.0), (1.2, 1.2, 1.0), (0.8, 0.8, 1.0)] {
            let xt = t(&[x]);
            let mut g = Graph::new();
            let v = g.param(&xt);
            let c = g.clip(v, 0.8, 1.2).unwrap();
            assert_eq!(g.value(c).item(), want);
            g.backward(c).unwrap();
            assert_eq!(g.grad(v).unwrap().item(), grad, "x={x}");
        }
        let mut g = Graph::new();
        let v = g.input(t(&[1.0]));
        assert!(matches!(g.clip(v, 1.0, 1.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn minimum_routing() {
        let (a, b) = (t(&[1.0, 5.0]), t(&[3.0, 2.0]));
        let mut g = Graph::new();
        let (va, vb) = (g.param(&a), g.param(&b));
        let m = g.minimum(va, vb).unwrap();
        assert_eq!(g.value(m).data(), &[1.0, 2.0]);
        let s = g.sum(m);
        g.backward(s).unwrap();
        assert_eq!(g.grad(va).unwrap().data(), &[1.0, 0.0]);
        assert_eq!(g.grad(vb).unwrap().data(), &[0.0, 1.0]);

        // tie: gradient goes to the first operand only
        let x = t(&[0.7]);
        let y = x.clone();
        let mut g = Graph::new();
        let (vx, vy) = (g.param(&x), g.param(&y));
        let m = g.minimum(vx, vy).unwrap();
        assert_eq!(g.value(m).item(), 0.7);
        g.backward(m).unwrap();
        assert_eq!(g.grad(vx).unwrap().item(), 1.0);
        assert_eq!(g.grad(vy).unwrap().item(), 0.0);
    }

    #[test]
    fn backward_requires_scalar() {
        let x = t(&[1.0, 2.0]);
        let mut g = Graph::new();
        let v = g.param(&x);
        let y = g.tanh(v);
        assert!(matches!(g.backward(y), Err(Error::Shape(_))));
    }

    #[test]
    fn squared_error_at_target_has_zero_gradient() {
        let w = t(&[0.3, -1.2, 2.0]);
        let target = w.clone();
        let mut g = Graph::new();
        let vw = g.param(&w);
        let vt = g.input(target);
        let d = g.sub(vw, vt).unwrap();
        let sq = g.square(d);
        let loss = g.mean(sq);
        g.backward(loss).unwrap();
        assert!(g.grad(vw).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grad_check_on_constant_and_quadratic() {
        let p = [t(&[0.4, -1.0])];
        let err = grad_check(&p, |g, _| Ok(g.scalar(3.0))).unwrap();
        assert_eq!(err, 0.0);
        // f = Σ 1.5·x² + 2x has exact central differences up to roundoff.
        let err = grad_check(&p, |g, v| {
            let sq = g.square(v[0]);
            let a = g.scale(sq, 1.5);
            let b = g.scale(v[0], 2.0);
            let s = g.add(a, b)?;
            Ok(g.sum(s))
        })
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn grad_check_reports_non_finite() {
        let p = [t(&[1.0])];
        let r = grad_check(&p, |g, v| {
            let big = g.scale(v[0], 1e308);
            let s = g.scale(big, 10.0);
            Ok(g.sum(s))
        });
        assert!(matches!(r, Err(Error::Numeric(_))));
    }
}
