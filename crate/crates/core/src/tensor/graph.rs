//! Reverse-mode autodiff over a linear tape.
//!
//! Nodes are appended in evaluation order, so every parent index is smaller
//! than its child's. Backward walks the tape once from the root downwards.

use std::borrow::Cow;

use super::kernels::{self, matmul_nt_acc, matmul_tn_acc};
use super::{Result, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
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
    Add(usize, usize),
    Sub(usize, usize),
    Scale(usize, f64),
    Mul(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Gather { table: usize, ids: Vec<usize> },
    Softmax(usize),
    LogSumExp(usize),
    RmsNorm { x: usize, gain: usize, inv: Vec<f64> },
    Silu(usize),
    Concat { parts: Vec<usize>, axis: usize },
    Slice { a: usize, axis: usize, start: usize },
    Reshape(usize),
    Sum(usize),
}

impl Op {
    fn parents(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::Softmax(a)
            | Op::LogSumExp(a)
            | Op::Silu(a)
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::Slice { a, .. } => vec![*a],
            Op::Gather { table, .. } => vec![*table],
            Op::RmsNorm { x, gain, .. } => vec![*x, *gain],
            Op::Concat { parts, .. } => parts.clone(),
        }
    }
}

/// One value on the tape together with the rule that produced it.
#[derive(Debug)]
pub struct DiffNode<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
    trainable: bool,
}

impl DiffNode<'_> {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn rule(&self) -> &'static str {
        match self.op {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Scale(..) => "scale",
            Op::Mul(..) => "mul",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Gather { .. } => "gather",
            Op::Softmax(..) => "softmax",
            Op::LogSumExp(..) => "logsumexp",
            Op::RmsNorm { .. } => "rmsnorm",
            Op::Silu(..) => "silu",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(..) => "reshape",
            Op::Sum(..) => "sum",
        }
    }
}

/// Gradients for trainable leaves, produced by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }

    pub fn count(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }
}

/// Computation graph confined to one thread. Leaves may borrow their
/// values so parameters are not copied onto the tape.
#[derive(Debug, Default)]
pub struct Graph<'a> {
    nodes: Vec<DiffNode<'a>>,
    backward_done: bool,
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, v: Var) -> &DiffNode<'a> {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.leaf(Cow::Borrowed(t), true)
    }

    pub fn param_owned(&mut self, t: Tensor) -> Var {
        self.leaf(Cow::Owned(t), true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: &'a Tensor) -> Var {
        self.leaf(Cow::Borrowed(t), false)
    }

    pub fn constant_owned(&mut self, t: Tensor) -> Var {
        self.leaf(Cow::Owned(t), false)
    }

    fn leaf(&mut self, value: Cow<'a, Tensor>, trainable: bool) -> Var {
        self.nodes.push(DiffNode {
            value,
            op: Op::Leaf,
            requires_grad: trainable,
            trainable,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        value.ensure_finite(name)?;
        let requires_grad = op.parents().iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(DiffNode {
            value: Cow::Owned(value),
            op,
            requires_grad,
            trainable: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        self.push(v, Op::Add(a.0, b.0), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        self.push(v, Op::Sub(a.0, b.0), "sub")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a.0, s), "scale")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip("mul", self.value(b), |x, y| x * y)?;
        self.push(v, Op::Mul(a.0, b.0), "mul")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push(v, Op::MatMul(a.0, b.0), "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a.0), "transpose")
    }

    /// Selects rows of `table`; backward scatter-adds into the table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let v = self.value(table).select_rows(ids)?;
        self.push(
            v,
            Op::Gather {
                table: table.0,
                ids: ids.to_vec(),
            },
            "gather",
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let axis = self.value(a).rank() - 1;
        let v = kernels::softmax(self.value(a), axis)?;
        self.push(v, Op::Softmax(a.0), "softmax")
    }

    /// Log-sum-exp of each row; output is `rows × 1`.
    pub fn log_sum_exp(&mut self, a: Var) -> Result<Var> {
        let v = kernels::log_sum_exp(self.value(a))?;
        self.push(v, Op::LogSumExp(a.0), "logsumexp")
    }

    /// Row-wise RMS normalization scaled by a `d`-vector gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let g = self.value(gain);
        if g.len() != xv.cols() {
            return Err(TensorError::ShapeMismatch {
                op: "rms_norm",
                left: xv.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        let (r, c) = (xv.rows(), xv.cols());
        let mut out = vec![0.0; r * c];
        let mut inv = Vec::with_capacity(r);
        for i in 0..r {
            inv.push(kernels::rms_norm_row(
                xv.row(i),
                g.data(),
                eps,
                &mut out[i * c..(i + 1) * c],
            ));
        }
        let v = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(
            v,
            Op::RmsNorm {
                x: x.0,
                gain: gain.0,
                inv,
            },
            "rmsnorm",
        )
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(kernels::silu);
        self.push(v, Op::Silu(a.0), "silu")
    }

    /// Concatenates 2-D tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Invalid("concat of zero tensors".into()));
        }
        if axis > 1 {
            return Err(TensorError::InvalidAxis { axis, rank: 2 });
        }
        let first = self.value(parts[0]).clone();
        let mut out = first;
        for p in &parts[1..] {
            let v = self.value(*p);
            if axis == 0 {
                out.push_rows(v)?;
            } else {
                out.push_cols(v)?;
            }
        }
        self.push(
            out,
            Op::Concat {
                parts: parts.iter().map(|p| p.0).collect(),
                axis,
            },
            "concat",
        )
    }

    /// Half-open `start..end` slice of a 2-D tensor along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let v = self.value(a);
        if v.rank() != 2 || axis > 1 {
            return Err(TensorError::InvalidAxis {
                axis,
                rank: v.rank(),
            });
        }
        let (r, c) = (v.rows(), v.cols());
        let limit = if axis == 0 { r } else { c };
        if start >= end || end > limit {
            return Err(TensorError::IndexOutOfRange {
                index: end,
                len: limit,
            });
        }
        let out = if axis == 0 {
            Tensor::new(vec![end - start, c], v.data()[start * c..end * c].to_vec())?
        } else {
            let w = end - start;
            let mut d = Vec::with_capacity(r * w);
            for i in 0..r {
                d.extend_from_slice(&v.row(i)[start..end]);
            }
            Tensor::new(vec![r, w], d)?
        };
        self.push(out, Op::Slice { a: a.0, axis, start }, "slice")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        self.push(v, Op::Reshape(a.0), "reshape")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a.0), "sum")
    }

    /// Mean cross-entropy of each row of `logits` against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, c) = (self.value(logits).rows(), self.value(logits).cols());
        if targets.len() != r {
            return Err(TensorError::Invalid(format!(
                "{} targets for {} logit rows",
                targets.len(),
                r
            )));
        }
        let mut onehot = vec![0.0; r * c];
        for (i, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(TensorError::IndexOutOfRange { index: t, len: c });
            }
            onehot[i * c + t] = 1.0;
        }
        let onehot = self.constant_owned(Tensor::new(vec![r, c], onehot)?);
        let lse = self.log_sum_exp(logits)?;
        let lse = self.sum(lse)?;
        let picked = self.mul(logits, onehot)?;
        let picked = self.sum(picked)?;
        let total = self.sub(lse, picked)?;
        self.scale(total, 1.0 / r as f64)
    }

    pub fn reset_grads(&mut self) {
        self.backward_done = false;
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let root_shape = self.shape(root).to_vec();
        if !self.value(root).is_scalar() {
            return Err(TensorError::NotScalar(root_shape));
        }
        let n = root.0 + 1;
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[root.0] = Some(Tensor::ones(&root_shape));

        for idx in (0..n).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            for p in node.op.parents() {
                if p >= idx {
                    return Err(TensorError::CycleDetected(idx));
                }
            }
            if node.trainable {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads)?;
        }
        // keep only trainable leaves
        for (i, g) in grads.iter_mut().enumerate() {
            if g.is_some() && !self.nodes[i].trainable {
                *g = None;
            }
        }
        self.backward_done = true;
        Ok(Gradients { grads })
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, || g.clone());
                self.acc(grads, *b, || g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, || g.clone());
                self.acc(grads, *b, || g.scale(-1.0));
            }
            Op::Scale(a, s) => self.acc(grads, *a, || g.scale(*s)),
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(Var(*a)), self.value(Var(*b)));
                self.acc(grads, *a, || g.zip("mul", vb, |x, y| x * y).unwrap());
                self.acc(grads, *b, || g.zip("mul", va, |x, y| x * y).unwrap());
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(Var(*a)), self.value(Var(*b)));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                self.acc(grads, *a, || {
                    let mut out = vec![0.0; m * k];
                    matmul_nt_acc(g.data(), vb.data(), &mut out, m, n, k);
                    Tensor::new(va.shape().to_vec(), out).unwrap()
                });
                self.acc(grads, *b, || {
                    let mut out = vec![0.0; k * n];
                    matmul_tn_acc(va.data(), g.data(), &mut out, k, m, n);
                    Tensor::new(vb.shape().to_vec(), out).unwrap()
                });
            }
            Op::Transpose(a) => self.acc(grads, *a, || g.transpose()),
            Op::Gather { table, ids } => {
                let tv = self.value(Var(*table));
                self.acc(grads, *table, || {
                    let mut out = Tensor::zeros(tv.shape());
                    for (i, &r) in ids.iter().enumerate() {
                        for (o, &x) in out.row_mut(r).iter_mut().zip(g.row(i)) {
                            *o += x;
                        }
                    }
                    out
                });
            }
            Op::Softmax(a) => {
                let y = &node.value;
                self.acc(grads, *a, || {
                    let mut out = Tensor::zeros(y.shape());
                    for i in 0..y.rows() {
                        let (yr, gr) = (y.row(i), g.row(i));
                        let d = kernels::dot(yr, gr);
                        for ((o, &yv), &gv) in out.row_mut(i).iter_mut().zip(yr).zip(gr) {
                            *o = yv * (gv - d);
                        }
                    }
                    out
                });
            }
            Op::LogSumExp(a) => {
                let x = self.value(Var(*a));
                let lse = &node.value;
                self.acc(grads, *a, || {
                    let mut out = Tensor::zeros(x.shape());
                    for i in 0..x.rows() {
                        let (l, gi) = (lse.data()[i], g.data()[i]);
                        for (o, &xv) in out.row_mut(i).iter_mut().zip(x.row(i)) {
                            *o = gi * (xv - l).exp();
                        }
                    }
                    out
                });
            }
            Op::RmsNorm { x, gain, inv } => {
                let xv = self.value(Var(*x));
                let gv = self.value(Var(*gain));
                let c = xv.cols();
                if self.wants(*x) {
                    let mut out = Tensor::zeros(xv.shape());
                    for i in 0..xv.rows() {
                        let (xr, gr, r) = (xv.row(i), g.row(i), inv[i]);
                        // dy/dx = r*gain*g - r^3/c * x * sum(g*gain*x)
                        let s: f64 = (0..c).map(|j| gr[j] * gv.data()[j] * xr[j]).sum();
                        let k = r * r * r * s / c as f64;
                        for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                            *o = r * gv.data()[j] * gr[j] - k * xr[j];
                        }
                    }
                    add_grad(grads, *x, out);
                }
                if self.wants(*gain) {
                    let mut out = vec![0.0; c];
                    for i in 0..xv.rows() {
                        let (xr, gr, r) = (xv.row(i), g.row(i), inv[i]);
                        for j in 0..c {
                            out[j] += gr[j] * xr[j] * r;
                        }
                    }
                    add_grad(grads, *gain, Tensor::new(gv.shape().to_vec(), out)?);
                }
            }
            Op::Silu(a) => {
                let x = self.value(Var(*a));
                self.acc(grads, *a, || g.zip("silu", x, |gv, xv| gv * kernels::silu_grad(xv)).unwrap());
            }
            Op::Concat { parts, axis } => {
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(Var(p));
                    let (pr, pc) = (pv.rows(), pv.cols());
                    if self.wants(p) {
                        let out = if *axis == 0 {
                            let c = g.cols();
                            Tensor::new(pv.shape().to_vec(), g.data()[offset * c..(offset + pr) * c].to_vec())?
                        } else {
                            let mut d = Vec::with_capacity(pr * pc);
                            for i in 0..pr {
                                d.extend_from_slice(&g.row(i)[offset..offset + pc]);
                            }
                            Tensor::new(pv.shape().to_vec(), d)?
                        };
                        add_grad(grads, p, out);
                    }
                    offset += if *axis == 0 { pr } else { pc };
                }
            }
            Op::Slice { a, axis, start } => {
                let av = self.value(Var(*a));
                self.acc(grads, *a, || {
                    let mut out = Tensor::zeros(av.shape());
                    let c = av.cols();
                    if *axis == 0 {
                        out.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                    } else {
                        let w = g.cols();
                        for i in 0..av.rows() {
                            out.row_mut(i)[*start..start + w].copy_from_slice(g.row(i));
                        }
                    }
                    out
                });
            }
            Op::Reshape(a) => {
                let shape = self.shape(Var(*a)).to_vec();
                self.acc(grads, *a, || g.reshape(&shape).unwrap());
            }
            Op::Sum(a) => {
                let shape = self.shape(Var(*a)).to_vec();
                let gv = g.data()[0];
                self.acc(grads, *a, || Tensor::full(&shape, gv));
            }
        }
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<Tensor>], parent: usize, f: impl FnOnce() -> Tensor) {
        if self.wants(parent) {
            add_grad(grads, parent, f());
        }
    }
}

fn add_grad(grads: &mut [Option<Tensor>], i: usize, g: Tensor) {
    match &mut grads[i] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
