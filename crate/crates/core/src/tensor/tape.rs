use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::ops::{self, Broadcast};
use super::{ParamId, ParamStore, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy)]
enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy)]
enum UnaryOp {
    Exp,
    Log,
    Square,
    Neg,
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
    Softplus,
    Scale(f64),
    AddScalar,
    Clamp(f64, f64),
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(usize, usize),
    Binary(BinaryOp, usize, usize, Broadcast),
    Unary(UnaryOp, usize),
    Sum(usize, usize),
    Mean(usize, usize),
    SumAll(usize),
    LogSumExp(usize, usize),
    Concat(Vec<usize>, usize),
    Slice { input: usize, axis: usize, start: usize },
    Reshape(usize),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run gradient tape. Build a fresh one for every forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}({:?})", self.id, *self.value())
    }
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

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// Free leaf that tracks its gradient (used for tests and probes).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Records a parameter. It is tracked only if its group is trainable.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        self.push(store.value(id).clone(), Op::Param(id), store.is_trainable(id))
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    pub fn concat(&self, parts: &[Var<'_>], axis: usize) -> Result<Var<'_>> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of zero tensors".into()))?;
        let ids: Vec<usize> = parts.iter().map(|v| v.id).collect();
        let value = {
            let nodes = self.nodes.borrow();
            let base = nodes[first.id].value.shape().to_vec();
            let (outer, _, inner) = ops::split_axis(&base, axis)?;
            let mut total = 0;
            for &i in &ids {
                let s = nodes[i].value.shape();
                let same_rest =
                    s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
                if !same_rest {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat",
                        lhs: base.clone(),
                        rhs: s.to_vec(),
                    });
                }
                total += s[axis];
            }
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for &i in &ids {
                    let t = &nodes[i].value;
                    let n = t.shape()[axis];
                    data.extend_from_slice(&t.data()[o * n * inner..(o + 1) * n * inner]);
                }
            }
            let mut shape = base;
            shape[axis] = total;
            Tensor::new(shape, data)?
        };
        let rg = self.requires(&ids);
        Ok(self.push(value, Op::Concat(ids, axis), rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut pending: Vec<Vec<Vec<f64>>> = vec![Vec::new(); loss.id + 1];
        let mut done: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        if root.requires_grad {
            pending[loss.id].push(vec![1.0]);
        }
        for id in (0..=loss.id).rev() {
            let Some(g) = reduce(std::mem::take(&mut pending[id])) else {
                continue;
            };
            backprop_node(&nodes, &nodes[id], &g, &mut pending);
            done[id] = Some(g);
        }
        let mut out = Gradients::default();
        for (id, g) in done.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let node = &nodes[id];
            let t = Tensor::new(node.value.shape().to_vec(), g)?;
            if let Op::Param(pid) = node.op {
                out.params.push((pid, t.clone()));
            }
            out.nodes.push((id, t));
        }
        Ok(out)
    }

    /// Backward pass whose parameter gradients are accumulated into `store`.
    pub fn backward_into(&self, loss: Var<'_>, store: &mut ParamStore) -> Result<()> {
        let grads = self.backward(loss)?;
        grads.accumulate_into(store);
        Ok(())
    }
}

fn accumulate(slot: &mut Vec<Vec<f64>>, contribution: Vec<f64>) {
    slot.push(contribution);
}

/// Sums the contributions a node received. The result does not depend on the
/// order in which consumers were recorded: two terms commute exactly, and
/// three or more are added in sorted order per element, so structurally
/// symmetric graphs get bit-identical gradients.
fn reduce(mut parts: Vec<Vec<f64>>) -> Option<Vec<f64>> {
    match parts.len() {
        0 => None,
        1 => parts.pop(),
        2 => {
            let b = parts.pop().expect("two parts");
            let mut a = parts.pop().expect("two parts");
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
            Some(a)
        }
        k => {
            let mut lane = Vec::with_capacity(k);
            let sum = (0..parts[0].len())
                .map(|i| {
                    lane.clear();
                    lane.extend(parts.iter().map(|p| p[i]));
                    lane.sort_unstable_by(f64::total_cmp);
                    lane.iter().sum()
                })
                .collect();
            Some(sum)
        }
    }
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Vec<Vec<f64>>]) {
    let wants = |i: usize| nodes[i].requires_grad;
    match &node.op {
        Op::Leaf | Op::Param(_) => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (n, k, m) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if wants(*a) {
                accumulate(&mut grads[*a], ops::matmul_nt(g, bv.data(), n, m, k));
            }
            if wants(*b) {
                accumulate(&mut grads[*b], ops::matmul_tn(av.data(), g, n, k, m));
            }
        }
        Op::Binary(op, a, b, rule) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let full = g.len();
            // index into each operand for element i of the output
            let ia = |i: usize| match rule {
                Broadcast::Lhs => i % av.len().max(1),
                _ => i,
            };
            let ib = |i: usize| match rule {
                Broadcast::Rhs => i % bv.len().max(1),
                _ => i,
            };
            let (x, y) = (av.data(), bv.data());
            let (da, db): (Vec<f64>, Vec<f64>) = (0..full)
                .map(|i| {
                    let (xa, yb) = (x[ia(i)], y[ib(i)]);
                    match op {
                        BinaryOp::Add => (g[i], g[i]),
                        BinaryOp::Sub => (g[i], -g[i]),
                        BinaryOp::Mul => (g[i] * yb, g[i] * xa),
                        BinaryOp::Div => (g[i] / yb, -g[i] * xa / (yb * yb)),
                    }
                })
                .unzip();
            if wants(*a) {
                let da = match rule {
                    Broadcast::Lhs => ops::reduce_leading(&da, av.len()),
                    _ => da,
                };
                accumulate(&mut grads[*a], da);
            }
            if wants(*b) {
                let db = match rule {
                    Broadcast::Rhs => ops::reduce_leading(&db, bv.len()),
                    _ => db,
                };
                accumulate(&mut grads[*b], db);
            }
        }
        Op::Unary(op, a) => {
            if !wants(*a) {
                return;
            }
            let x = nodes[*a].value.data();
            let y = node.value.data();
            let d: Vec<f64> = (0..g.len())
                .map(|i| {
                    let local = match *op {
                        UnaryOp::Exp => y[i],
                        UnaryOp::Log => 1.0 / x[i],
                        UnaryOp::Square => 2.0 * x[i],
                        UnaryOp::Neg => -1.0,
                        UnaryOp::Relu => {
                            if x[i] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        UnaryOp::LeakyRelu(s) => {
                            if x[i] > 0.0 {
                                1.0
                            } else {
                                s
                            }
                        }
                        UnaryOp::Sigmoid => y[i] * (1.0 - y[i]),
                        UnaryOp::Tanh => 1.0 - y[i] * y[i],
                        UnaryOp::Softplus => ops::sigmoid(x[i]),
                        UnaryOp::Scale(c) => c,
                        UnaryOp::AddScalar => 1.0,
                        UnaryOp::Clamp(lo, hi) => {
                            if x[i] >= lo && x[i] <= hi {
                                1.0
                            } else {
                                0.0
                            }
                        }
                    };
                    g[i] * local
                })
                .collect();
            accumulate(&mut grads[*a], d);
        }
        Op::Sum(a, axis) | Op::Mean(a, axis) => {
            if !wants(*a) {
                return;
            }
            let shape = nodes[*a].value.shape();
            let (outer, n, inner) = ops::split_axis(shape, *axis).expect("checked in forward");
            let scale = if matches!(node.op, Op::Mean(..)) {
                1.0 / n as f64
            } else {
                1.0
            };
            let mut d = vec![0.0; outer * n * inner];
            for o in 0..outer {
                for j in 0..n {
                    for i in 0..inner {
                        d[(o * n + j) * inner + i] = g[o * inner + i] * scale;
                    }
                }
            }
            accumulate(&mut grads[*a], d);
        }
        Op::SumAll(a) => {
            if wants(*a) {
                accumulate(&mut grads[*a], vec![g[0]; nodes[*a].value.len()]);
            }
        }
        Op::LogSumExp(a, axis) => {
            if !wants(*a) {
                return;
            }
            let xv = &nodes[*a].value;
            let (outer, n, inner) = ops::split_axis(xv.shape(), *axis).expect("checked in forward");
            let (x, y) = (xv.data(), node.value.data());
            let mut d = vec![0.0; x.len()];
            for o in 0..outer {
                for j in 0..n {
                    for i in 0..inner {
                        let k = (o * n + j) * inner + i;
                        let r = o * inner + i;
                        // softmax weight; a lane of all -inf has no mass
                        let w = if y[r] == f64::NEG_INFINITY {
                            0.0
                        } else {
                            (x[k] - y[r]).exp()
                        };
                        d[k] = g[r] * w;
                    }
                }
            }
            accumulate(&mut grads[*a], d);
        }
        Op::Concat(parts, axis) => {
            let shape = node.value.shape();
            let (outer, total, inner) = ops::split_axis(shape, *axis).expect("checked in forward");
            let mut offset = 0;
            for &p in parts {
                let n = nodes[p].value.shape()[*axis];
                if wants(p) {
                    let mut d = Vec::with_capacity(outer * n * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        d.extend_from_slice(&g[start..start + n * inner]);
                    }
                    accumulate(&mut grads[p], d);
                }
                offset += n;
            }
        }
        Op::Slice { input, axis, start } => {
            if !wants(*input) {
                return;
            }
            let full = nodes[*input].value.shape();
            let (outer, n, inner) = ops::split_axis(full, *axis).expect("checked in forward");
            let len = node.value.shape()[*axis];
            let mut d = vec![0.0; outer * n * inner];
            for o in 0..outer {
                let src = &g[o * len * inner..(o + 1) * len * inner];
                let dst = (o * n + start) * inner;
                d[dst..dst + len * inner].copy_from_slice(src);
            }
            accumulate(&mut grads[*input], d);
        }
        Op::Reshape(a) => {
            if wants(*a) {
                accumulate(&mut grads[*a], g.to_vec());
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// The recorded value (shared, not copied).
    pub fn value(&self) -> Rc<Tensor> {
        Rc::clone(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Same value, cut from the tape.
    pub fn detach(&self) -> Var<'t> {
        let v = Tensor::clone(&self.value());
        self.tape.constant(v)
    }

    fn unary(&self, op: UnaryOp, f: impl Fn(f64) -> f64) -> Var<'t> {
        let value = self.value().map(f);
        let rg = self.requires_grad();
        self.tape.push(value, Op::Unary(op, self.id), rg)
    }

    fn binary(&self, other: Var<'t>, op: BinaryOp, name: &'static str) -> Result<Var<'t>> {
        let value = {
            let (a, b) = (self.value(), other.value());
            let rule = ops::broadcast_rule(name, a.shape(), b.shape())?;
            let f = match op {
                BinaryOp::Add => |x: f64, y: f64| x + y,
                BinaryOp::Sub => |x: f64, y: f64| x - y,
                BinaryOp::Mul => |x: f64, y: f64| x * y,
                BinaryOp::Div => |x: f64, y: f64| x / y,
            };
            (ops::binary(&a, &b, rule, f), rule)
        };
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(value.0, Op::Binary(op, self.id, other.id, value.1), rg))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryOp::Add, "add")
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryOp::Sub, "sub")
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryOp::Mul, "mul")
    }

    pub fn div(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryOp::Div, "div")
    }

    /// `[n × k] · [k × m]`.
    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let (a, b) = (self.value(), other.value());
            let (sa, sb) = (a.shape(), b.shape());
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul",
                    lhs: sa.to_vec(),
                    rhs: sb.to_vec(),
                });
            }
            let data = ops::matmul(a.data(), b.data(), sa[0], sa[1], sb[1]);
            Tensor::new(vec![sa[0], sb[1]], data)?
        };
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(value, Op::MatMul(self.id, other.id), rg))
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(UnaryOp::Exp, f64::exp)
    }

    pub fn ln(&self) -> Var<'t> {
        self.unary(UnaryOp::Log, f64::ln)
    }

    pub fn square(&self) -> Var<'t> {
        self.unary(UnaryOp::Square, |x| x * x)
    }

    pub fn neg(&self) -> Var<'t> {
        self.unary(UnaryOp::Neg, |x| -x)
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(UnaryOp::Relu, |x| x.max(0.0))
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<'t> {
        self.unary(UnaryOp::LeakyRelu(slope), move |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(UnaryOp::Sigmoid, ops::sigmoid)
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(UnaryOp::Tanh, f64::tanh)
    }

    pub fn softplus(&self) -> Var<'t> {
        self.unary(UnaryOp::Softplus, ops::softplus)
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(UnaryOp::Scale(c), move |x| c * x)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.unary(UnaryOp::AddScalar, move |x| x + c)
    }

    /// Elementwise clamp; the gradient is cut outside `[lo, hi]`.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(UnaryOp::Clamp(lo, hi), move |x| x.clamp(lo, hi))
    }

    pub fn sum(&self, axis: usize) -> Result<Var<'t>> {
        let value = ops::reduce_axis(&self.value(), axis, |lane| lane.sum())?;
        let rg = self.requires_grad();
        Ok(self.tape.push(value, Op::Sum(self.id, axis), rg))
    }

    pub fn mean(&self, axis: usize) -> Result<Var<'t>> {
        let value = ops::reduce_axis(&self.value(), axis, |lane| {
            let (mut s, mut n) = (0.0, 0usize);
            for v in lane {
                s += v;
                n += 1;
            }
            s / n as f64
        })?;
        let rg = self.requires_grad();
        Ok(self.tape.push(value, Op::Mean(self.id, axis), rg))
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&self) -> Var<'t> {
        let value = Tensor::scalar(self.value().sum());
        let rg = self.requires_grad();
        self.tape.push(value, Op::SumAll(self.id), rg)
    }

    /// Mean of every element, as a scalar.
    pub fn mean_all(&self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Max-shifted log-sum-exp along `axis`.
    pub fn logsumexp(&self, axis: usize) -> Result<Var<'t>> {
        let value = ops::reduce_axis(&self.value(), axis, ops::logsumexp_lane)?;
        let rg = self.requires_grad();
        Ok(self.tape.push(value, Op::LogSumExp(self.id, axis), rg))
    }

    /// Entries `start..end` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Var<'t>> {
        let value = {
            let t = self.value();
            let (outer, n, inner) = ops::split_axis(t.shape(), axis)?;
            if start > end || end > n {
                return Err(TensorError::Slice { start, end, extent: n });
            }
            let len = end - start;
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let from = (o * n + start) * inner;
                data.extend_from_slice(&t.data()[from..from + len * inner]);
            }
            let mut shape = t.shape().to_vec();
            shape[axis] = len;
            Tensor::new(shape, data)?
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(
            value,
            Op::Slice {
                input: self.id,
                axis,
                start,
            },
            rg,
        ))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let value = Tensor::clone(&self.value()).reshape(shape)?;
        let rg = self.requires_grad();
        Ok(self.tape.push(value, Op::Reshape(self.id), rg))
    }

    pub fn backward(&self) -> Result<Gradients> {
        self.tape.backward(*self)
    }
}

/// Result of a backward sweep.
#[derive(Debug, Default)]
pub struct Gradients {
    nodes: Vec<(usize, Tensor)>,
    params: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    /// Gradient with respect to a recorded value, if it received one.
    pub fn wrt(&self, var: Var<'_>) -> Option<&Tensor> {
        self.nodes
            .binary_search_by_key(&var.id, |(i, _)| *i)
            .ok()
            .map(|k| &self.nodes[k].1)
    }

    pub fn params(&self) -> &[(ParamId, Tensor)] {
        &self.params
    }

    /// Adds parameter gradients into the store's `grad` slots.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (id, g) in &self.params {
            if !store.is_trainable(*id) {
                continue;
            }
            let p = store.param_mut(*id);
            match &mut p.grad {
                Some(acc) => {
                    for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += v;
                    }
                }
                None => p.grad = Some(g.clone()),
            }
        }
    }
}
