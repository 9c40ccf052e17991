//! Reverse-mode gradient tape.
//!
//! Every primitive call appends one node holding its output value and
//! whatever the backward pass needs. [`GradTape::backward`] walks the nodes
//! in reverse recording order, so each node is visited after all of its
//! consumers and every leaf ends up with exactly one accumulated gradient.
//!
//! Leaves borrow their tensors where possible, so binding a large parameter
//! set to a fresh tape per sample does not copy weights.

use alloc::borrow::Cow;
use alloc::vec::Vec;

use crate::ops;
use crate::tensor::{Tensor, Window};
use crate::{Error, Result};

/// Handle to a value recorded on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var, usize),
    Clamp(Var, f64, f64),
    Reshape(Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    Sum(Var),
    Mean(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        win: Window,
        cols: Vec<f64>,
    },
    Deconv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        win: Window,
    },
    /// Scalar function whose gradient was produced together with its value.
    Scalar {
        x: Var,
        grad: Tensor,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Single-threaded recording of one forward pass.
pub struct GradTape<'a> {
    nodes: Vec<Node<'a>>,
}

impl Default for GradTape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> GradTape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Learnable leaf borrowed from its owner.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, true)
    }

    /// Learnable leaf owned by the tape.
    pub fn param_owned(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, true)
    }

    pub fn constant(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, false)
    }

    pub fn constant_owned(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(out), Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        let rg = self.rg(x);
        Ok(self.push(Cow::Owned(out), Op::Transpose(x), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(out), Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::sub(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(out), Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::elementwise_mul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(out), Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = ops::scale(self.value(x), s);
        let rg = self.rg(x);
        self.push(Cow::Owned(out), Op::Scale(x, s), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ops::relu(self.value(x));
        let rg = self.rg(x);
        self.push(Cow::Owned(out), Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = ops::sigmoid(self.value(x));
        let rg = self.rg(x);
        self.push(Cow::Owned(out), Op::Sigmoid(x), rg)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = ops::softmax(self.value(x), axis)?;
        let rg = self.rg(x);
        Ok(self.push(Cow::Owned(out), Op::Softmax(x, axis), rg))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = ops::clamp(self.value(x), lo, hi);
        let rg = self.rg(x);
        self.push(Cow::Owned(out), Op::Clamp(x, lo, hi), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(Cow::Owned(out), Op::Reshape(x), rg))
    }

    /// Rows `start..start+len` of a 2-D value.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let src = self.value(x);
        let [rows, cols] = src.dims2("slice_rows")?;
        if len == 0 || start + len > rows {
            return Err(Error::shape(
                "slice_rows",
                src.shape(),
                alloc::format!("rows {start}..{}", start + len),
            ));
        }
        let out = Tensor::raw(&[len, cols], src.data()[start * cols..(start + len) * cols].to_vec());
        let rg = self.rg(x);
        Ok(self.push(Cow::Owned(out), Op::SliceRows { x, start }, rg))
    }

    /// Stacks 2-D values with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let cols = self.value(*first).dims2("concat_rows")?[1];
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let [r, c] = self.value(p).dims2("concat_rows")?;
            if c != cols {
                return Err(Error::mismatch("concat_rows", self.shape(*first), self.shape(p)));
            }
            data.extend_from_slice(self.value(p).data());
            rows += r;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Cow::Owned(Tensor::raw(&[rows, cols], data)),
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(Cow::Owned(out), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(ops::mean(self.value(x)));
        let rg = self.rg(x);
        self.push(Cow::Owned(out), Op::Mean(x), rg)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let win = ops::conv2d_window(self.value(x), self.value(w), stride, pad)?;
        let cols = win.im2col(self.value(x).data());
        let out = ops::conv2d_with_cols(&win, &cols, self.value(w), b.map(|b| self.value(b)))?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Cow::Owned(out), Op::Conv2d { x, w, b, win, cols }, rg))
    }

    pub fn deconv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let win = ops::deconv2d_window(self.value(x), self.value(w), stride, pad)?;
        let out = ops::deconv2d_forward(&win, self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Cow::Owned(out), Op::Deconv2d { x, w, b, win }, rg))
    }

    /// Records a scalar `value = f(x)` whose gradient `∂f/∂x` is already known.
    pub fn scalar_fn(&mut self, x: Var, value: f64, grad: Tensor) -> Result<Var> {
        if grad.shape() != self.shape(x) {
            return Err(Error::mismatch("scalar_fn", grad.shape(), self.shape(x)));
        }
        let rg = self.rg(x);
        Ok(self.push(Cow::Owned(Tensor::scalar(value)), Op::Scalar { x, grad }, rg))
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    /// Back-propagates from a one-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.numel() != 1 {
            return Err(Error::Contract(alloc::format!(
                "backward needs a scalar root, got shape {:?}",
                rv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut visited = Vec::new();
        grads[root.0] = Some(Tensor::ones(rv.shape()));
        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            visited.push(id);
            self.backward_node(node, g, &mut grads);
        }
        Ok(Gradients { grads, visited })
    }

    fn backward_node(&self, node: &Node<'a>, g: Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| -> &Tensor { &self.nodes[v.0].value };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (da, db) = ops::matmul_backward(val(*a), val(*b), &g);
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Transpose(x) => {
                let t = g.transpose().expect("2-D");
                self.accumulate(grads, *x, t);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *b, g.map(|v| -v));
                self.accumulate(grads, *a, g);
            }
            Op::Mul(a, b) => {
                let da = ops::elementwise_mul(&g, val(*b)).expect("same shape");
                let db = ops::elementwise_mul(&g, val(*a)).expect("same shape");
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, ops::scale(&g, *s)),
            Op::Relu(x) => {
                let d = zip(&g, val(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                self.accumulate(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let d = zip(&g, &node.value, |gv, y| gv * y * (1.0 - y));
                self.accumulate(grads, *x, d);
            }
            Op::Softmax(x, axis) => {
                let d = ops::softmax_backward(&node.value, &g, *axis);
                self.accumulate(grads, *x, d);
            }
            Op::Clamp(x, lo, hi) => {
                let d = zip(&g, val(*x), |gv, xv| if xv >= *lo && xv <= *hi { gv } else { 0.0 });
                self.accumulate(grads, *x, d);
            }
            Op::Reshape(x) => {
                let d = g.with_shape(val(*x).shape());
                self.accumulate(grads, *x, d);
            }
            Op::SliceRows { x, start } => {
                let src = val(*x);
                let cols = src.shape()[1];
                let mut d = Tensor::zeros(src.shape());
                d.data_mut()[start * cols..start * cols + g.numel()].copy_from_slice(g.data());
                self.accumulate(grads, *x, d);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).numel();
                    let d = Tensor::raw(val(p).shape(), g.data()[off..off + n].to_vec());
                    off += n;
                    self.accumulate(grads, p, d);
                }
            }
            Op::Sum(x) => {
                let gv = g.data()[0];
                self.accumulate(grads, *x, Tensor::full(val(*x).shape(), gv));
            }
            Op::Mean(x) => {
                let n = val(*x).numel() as f64;
                let gv = g.data()[0] / n;
                self.accumulate(grads, *x, Tensor::full(val(*x).shape(), gv));
            }
            Op::Conv2d { x, w, b, win, cols } => {
                let (dx, dw, db) = ops::conv2d_backward(win, cols, val(*w), &g, self.rg(*x));
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *w, dw);
                if let Some(b) = b {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Deconv2d { x, w, b, win } => {
                let (dx, dw, db) = ops::deconv2d_backward(win, val(*x), val(*w), &g, self.rg(*x));
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *w, dw);
                if let Some(b) = b {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Scalar { x, grad } => {
                let d = ops::scale(grad, g.data()[0]);
                self.accumulate(grads, *x, d);
            }
        }
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::raw(
        a.shape(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

/// Result of one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    visited: Vec<usize>,
}

impl Gradients {
    /// Accumulated gradient of a leaf; `None` when the root does not
    /// depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a leaf, zeros when the root does not depend on it.
    pub fn wrt(&self, tape: &GradTape<'_>, v: Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(v)))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Node indices of the non-leaf ops the pass visited, in visit order.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}
