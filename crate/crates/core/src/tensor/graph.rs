use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::{gemm, Tensor};
use crate::error::{Error, Result};

thread_local! {
    static SIGMOID_FAULT: Cell<Option<f64>> = const { Cell::new(None) };
}

/// Scales the sigmoid backward rule on the current thread by `factor`
/// (`None` restores the correct rule). Exists so gradient checking can be
/// shown to catch a broken derivative.
#[doc(hidden)]
pub fn inject_sigmoid_backward_fault(factor: Option<f64>) {
    SIGMOID_FAULT.with(|f| f.set(factor));
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Sigmoid(usize),
    Tanh(usize),
    Powf(usize, f64),
    ClampMin(usize, f64),
    Lerp(usize, usize, usize),
    Concat(Vec<usize>, usize),
    Narrow {
        src: usize,
        axis: usize,
        start: usize,
    },
    Softmax(usize),
    Sum(usize),
    Mean(usize),
    GatherRows(usize, Rc<[usize]>),
    ReplaceRow(usize, usize, usize),
    GroupSumRows(usize, usize),
    Reshape(usize),
    Transpose(usize),
}

#[derive(Debug)]
struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Append-only operation record. Node ids grow in construction order, which
/// is a topological order of the computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

/// Gradients of a scalar with respect to the leaves of a graph.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`; zeros when `var` does not influence the loss.
    pub fn get(&self, var: Var<'_>) -> Tensor {
        match self.grads.get(var.id).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.id]),
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

    /// A leaf that receives a gradient.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn zeros(&self, shape: &[usize]) -> Var<'_> {
        self.constant(Tensor::zeros(shape))
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat<'g>(&'g self, parts: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero parts".into()))?;
        let base = first.value();
        let rank = base.rank();
        if axis >= rank {
            return Err(Error::shape("concat", base.shape(), &[axis]));
        }
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let mut along = 0;
        for v in &values {
            let ok = v.rank() == rank
                && v.shape()
                    .iter()
                    .zip(base.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", base.shape(), v.shape()));
            }
            along += v.shape()[axis];
        }
        let outer: usize = base.shape()[..axis].iter().product();
        let inner: usize = base.shape()[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * along * inner);
        for o in 0..outer {
            for v in &values {
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base.shape().to_vec();
        shape[axis] = along;
        let rg = parts.iter().any(|p| p.requires_grad());
        Ok(self.push(
            Tensor { shape, data },
            Op::Concat(parts.iter().map(|p| p.id).collect(), axis),
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let sigmoid_fault = SIGMOID_FAULT.with(Cell::get);
        let n = nodes.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let mut send = |pid: usize, t: Tensor| {
                if !nodes[pid].requires_grad {
                    return;
                }
                match &mut grads[pid] {
                    Some(acc) => acc.add_assign(&t),
                    slot => *slot = Some(t),
                };
            };
            let out = &node.value;
            let val = |pid: usize| &nodes[pid].value;
            let rg = |pid: usize| nodes[pid].requires_grad;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (m, k, nn) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    if rg(*a) {
                        let mut ga = vec![0.0; m * k];
                        gemm(m, nn, k, g.data(), false, bv.data(), true, &mut ga, false);
                        send(*a, Tensor::new(av.shape().to_vec(), ga)?);
                    }
                    if rg(*b) {
                        let mut gb = vec![0.0; k * nn];
                        gemm(k, m, nn, av.data(), true, g.data(), false, &mut gb, false);
                        send(*b, Tensor::new(bv.shape().to_vec(), gb)?);
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    for (pid, s) in [(*a, 1.0), (*b, sign)] {
                        if !rg(pid) {
                            continue;
                        }
                        let shape = val(pid).shape();
                        if shape == g.shape() {
                            send(pid, if s == 1.0 { g.clone() } else { g.scale(s) });
                        } else {
                            send(pid, Tensor::full(shape, s * g.sum()));
                        }
                    }
                }
                Op::Mul(a, b) => {
                    for (pid, other) in [(*a, *b), (*b, *a)] {
                        if !rg(pid) {
                            continue;
                        }
                        let (pv, ov) = (val(pid), val(other));
                        if pv.shape() == g.shape() {
                            let data = if ov.numel() == g.numel() {
                                zip_map(g.data(), ov.data(), |x, y| x * y)
                            } else {
                                let s = ov.item();
                                g.data().iter().map(|x| x * s).collect()
                            };
                            send(pid, Tensor::new(g.shape().to_vec(), data)?);
                        } else {
                            let s: f64 = g.data().iter().zip(ov.data()).map(|(x, y)| x * y).sum();
                            send(pid, Tensor::full(pv.shape(), s));
                        }
                    }
                }
                Op::AddRow(a, r) => {
                    if rg(*a) {
                        send(*a, g.clone());
                    }
                    if rg(*r) {
                        let cols = g.cols();
                        let mut acc = vec![0.0; cols];
                        for row in g.data().chunks(cols) {
                            for (s, v) in acc.iter_mut().zip(row) {
                                *s += v;
                            }
                        }
                        send(*r, Tensor::new(val(*r).shape().to_vec(), acc)?);
                    }
                }
                Op::Scale(a, c) => send(*a, g.scale(*c)),
                Op::AddScalar(a) => send(*a, g),
                Op::Sigmoid(a) => {
                    let f = sigmoid_fault.unwrap_or(1.0);
                    let d = zip_map(g.data(), out.data(), |g, y| f * g * y * (1.0 - y));
                    send(*a, Tensor::new(g.shape().to_vec(), d)?);
                }
                Op::Tanh(a) => {
                    let d = zip_map(g.data(), out.data(), |g, y| g * (1.0 - y * y));
                    send(*a, Tensor::new(g.shape().to_vec(), d)?);
                }
                Op::Powf(a, p) => {
                    let d = zip_map(g.data(), val(*a).data(), |g, x| g * p * x.powf(p - 1.0));
                    send(*a, Tensor::new(g.shape().to_vec(), d)?);
                }
                Op::ClampMin(a, c) => {
                    let d = zip_map(g.data(), val(*a).data(), |g, x| if x > *c { g } else { 0.0 });
                    send(*a, Tensor::new(g.shape().to_vec(), d)?);
                }
                Op::Lerp(z, a, b) => {
                    let (zv, av, bv) = (val(*z), val(*a), val(*b));
                    if rg(*z) {
                        let d: Vec<f64> = (0..g.numel())
                            .map(|i| g.data()[i] * (av.data()[i] - bv.data()[i]))
                            .collect();
                        send(*z, Tensor::new(g.shape().to_vec(), d)?);
                    }
                    if rg(*a) {
                        let d = zip_map(g.data(), zv.data(), |g, z| g * z);
                        send(*a, Tensor::new(g.shape().to_vec(), d)?);
                    }
                    if rg(*b) {
                        let d = zip_map(g.data(), zv.data(), |g, z| g * (1.0 - z));
                        send(*b, Tensor::new(g.shape().to_vec(), d)?);
                    }
                }
                Op::Concat(parts, axis) => {
                    let outer: usize = out.shape()[..*axis].iter().product();
                    let inner: usize = out.shape()[axis + 1..].iter().product();
                    let along = out.shape()[*axis];
                    let mut offset = 0;
                    for &pid in parts {
                        let pv = val(pid);
                        let width = pv.shape()[*axis];
                        if rg(pid) {
                            let mut d = Vec::with_capacity(pv.numel());
                            for o in 0..outer {
                                let start = (o * along + offset) * inner;
                                d.extend_from_slice(&g.data()[start..start + width * inner]);
                            }
                            send(pid, Tensor::new(pv.shape().to_vec(), d)?);
                        }
                        offset += width;
                    }
                }
                Op::Narrow { src, axis, start } => {
                    let sv = val(*src);
                    let outer: usize = sv.shape()[..*axis].iter().product();
                    let inner: usize = sv.shape()[axis + 1..].iter().product();
                    let along = sv.shape()[*axis];
                    let width = out.shape()[*axis];
                    let mut d = vec![0.0; sv.numel()];
                    for o in 0..outer {
                        let dst = (o * along + start) * inner;
                        let srci = o * width * inner;
                        d[dst..dst + width * inner]
                            .copy_from_slice(&g.data()[srci..srci + width * inner]);
                    }
                    send(*src, Tensor::new(sv.shape().to_vec(), d)?);
                }
                Op::Softmax(a) => {
                    let dot: f64 = g.data().iter().zip(out.data()).map(|(g, y)| g * y).sum();
                    let d = zip_map(g.data(), out.data(), |g, y| y * (g - dot));
                    send(*a, Tensor::new(g.shape().to_vec(), d)?);
                }
                Op::Sum(a) => send(*a, Tensor::full(val(*a).shape(), g.item())),
                Op::Mean(a) => {
                    let av = val(*a);
                    send(*a, Tensor::full(av.shape(), g.item() / av.numel() as f64));
                }
                Op::GatherRows(a, idx) => {
                    let av = val(*a);
                    let cols = av.cols();
                    let mut d = vec![0.0; av.numel()];
                    for (r, &src) in idx.iter().enumerate() {
                        let row = &g.data()[r * cols..(r + 1) * cols];
                        for (acc, v) in d[src * cols..(src + 1) * cols].iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    send(*a, Tensor::new(av.shape().to_vec(), d)?);
                }
                Op::ReplaceRow(a, row, r) => {
                    let cols = g.cols();
                    if rg(*r) {
                        let d = g.data()[row * cols..(row + 1) * cols].to_vec();
                        send(*r, Tensor::new(val(*r).shape().to_vec(), d)?);
                    }
                    if rg(*a) {
                        let mut ga = g;
                        ga.data_mut()[row * cols..(row + 1) * cols].fill(0.0);
                        send(*a, ga);
                    }
                }
                Op::GroupSumRows(a, k) => {
                    let av = val(*a);
                    let cols = av.cols();
                    let mut d = Vec::with_capacity(av.numel());
                    for r in 0..av.rows() {
                        let grp = r / k;
                        d.extend_from_slice(&g.data()[grp * cols..(grp + 1) * cols]);
                    }
                    send(*a, Tensor::new(av.shape().to_vec(), d)?);
                }
                Op::Reshape(a) => {
                    let shape = val(*a).shape().to_vec();
                    send(*a, Tensor::new(shape, g.into_data())?);
                }
                Op::Transpose(a) => send(*a, transpose(&g)),
            }
        }

        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn transpose(t: &Tensor) -> Tensor {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let mut d = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            d[j * r + i] = t.data()[i * c + j];
        }
    }
    Tensor {
        shape: vec![c, r],
        data: d,
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// fallible arithmetic, so not the std operator traits
#[allow(clippy::should_implement_trait)]
impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad(self.id)
    }

    fn unary(self, value: Tensor, op: Op) -> Var<'g> {
        let rg = self.requires_grad();
        self.graph.push(value, op, rg)
    }

    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        let out = a.matmul(&b)?;
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.graph.push(out, Op::MatMul(self.id, other.id), rg))
    }

    fn binary(
        self,
        other: Var<'g>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        let out = if a.shape() == b.shape() {
            Tensor {
                shape: a.shape().to_vec(),
                data: zip_map(a.data(), b.data(), &f),
            }
        } else if b.numel() == 1 {
            let s = b.item();
            a.map(|x| f(x, s))
        } else if a.numel() == 1 {
            let s = a.item();
            b.map(|y| f(s, y))
        } else {
            return Err(Error::shape(name, a.shape(), b.shape()));
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.graph.push(out, op, rg))
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "add", |x, y| x + y, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "sub", |x, y| x - y, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "mul", |x, y| x * y, Op::Mul(self.id, other.id))
    }

    /// Add a `1 × c` row to every row of an `r × c` matrix.
    pub fn add_row(self, row: Var<'g>) -> Result<Var<'g>> {
        let (a, r) = (self.value(), row.value());
        if a.rank() != 2 || r.numel() != a.cols() {
            return Err(Error::shape("add_row", a.shape(), r.shape()));
        }
        let cols = a.cols();
        let mut data = Vec::with_capacity(a.numel());
        for chunk in a.data().chunks_exact(cols) {
            data.extend(chunk.iter().zip(r.data()).map(|(v, b)| v + b));
        }
        let out = Tensor {
            shape: a.shape().to_vec(),
            data,
        };
        let rg = self.requires_grad() || row.requires_grad();
        Ok(self.graph.push(out, Op::AddRow(self.id, row.id), rg))
    }

    pub fn scale(self, c: f64) -> Var<'g> {
        let v = self.value().scale(c);
        self.unary(v, Op::Scale(self.id, c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'g> {
        let v = self.value().map(|x| x + c);
        self.unary(v, Op::AddScalar(self.id))
    }

    pub fn neg(self) -> Var<'g> {
        self.scale(-1.0)
    }

    /// `1 - x`.
    pub fn one_minus(self) -> Var<'g> {
        self.scale(-1.0).add_scalar(1.0)
    }

    pub fn sigmoid(self) -> Var<'g> {
        let v = self.value().map(sigmoid);
        self.unary(v, Op::Sigmoid(self.id))
    }

    pub fn tanh(self) -> Var<'g> {
        let v = self.value().map(f64::tanh);
        self.unary(v, Op::Tanh(self.id))
    }

    pub fn powf(self, p: f64) -> Var<'g> {
        let v = self.value().map(|x| x.powf(p));
        self.unary(v, Op::Powf(self.id, p))
    }

    pub fn square(self) -> Result<Var<'g>> {
        self.mul(self)
    }

    /// Elementwise `max(x, c)`; the gradient is blocked where clamped.
    pub fn clamp_min(self, c: f64) -> Var<'g> {
        let v = self.value().map(|x| x.max(c));
        self.unary(v, Op::ClampMin(self.id, c))
    }

    /// Affine combination `z ⊙ self + (1 − z) ⊙ other`.
    pub fn lerp(self, z: Var<'g>, other: Var<'g>) -> Result<Var<'g>> {
        let (zv, a, b) = (z.value(), self.value(), other.value());
        if zv.shape() != a.shape() || a.shape() != b.shape() {
            return Err(Error::shape("lerp", a.shape(), b.shape()));
        }
        let data = (0..a.numel())
            .map(|i| {
                let zi = zv.data()[i];
                zi * a.data()[i] + (1.0 - zi) * b.data()[i]
            })
            .collect();
        let out = Tensor {
            shape: a.shape().to_vec(),
            data,
        };
        let rg = z.requires_grad() || self.requires_grad() || other.requires_grad();
        Ok(self.graph.push(out, Op::Lerp(z.id, self.id, other.id), rg))
    }

    /// Slice `len` entries along `axis` starting at `start`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'g>> {
        let v = self.value();
        if axis >= v.rank() || len == 0 || start + len > v.shape()[axis] {
            return Err(Error::shape("narrow", v.shape(), &[axis, start, len]));
        }
        let outer: usize = v.shape()[..axis].iter().product();
        let inner: usize = v.shape()[axis + 1..].iter().product();
        let along = v.shape()[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * along + start) * inner;
            data.extend_from_slice(&v.data()[s..s + len * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        Ok(self.unary(
            Tensor { shape, data },
            Op::Narrow {
                src: self.id,
                axis,
                start,
            },
        ))
    }

    /// Max-shifted softmax over a vector (rank 1, or a single row/column).
    pub fn softmax(self) -> Result<Var<'g>> {
        let v = self.value();
        let is_vector = v.rank() == 1 || (v.rank() == 2 && (v.rows() == 1 || v.cols() == 1));
        if !is_vector {
            return Err(Error::shape("softmax", v.shape(), &[]));
        }
        if v.data().iter().any(|x| x.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let max = v.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = v.data().iter().map(|x| (x - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let out = Tensor {
            shape: v.shape().to_vec(),
            data: exps.iter().map(|e| e / total).collect(),
        };
        Ok(self.unary(out, Op::Softmax(self.id)))
    }

    pub fn sum(self) -> Var<'g> {
        let s = self.value().sum();
        self.unary(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'g> {
        let v = self.value();
        let s = v.sum() / v.numel() as f64;
        self.unary(Tensor::scalar(s), Op::Mean(self.id))
    }

    /// Select rows (with repetition) of a matrix.
    pub fn gather_rows(self, idx: Rc<[usize]>) -> Result<Var<'g>> {
        let v = self.value();
        if v.rank() != 2 || idx.is_empty() || idx.iter().any(|&i| i >= v.rows()) {
            return Err(Error::shape("gather_rows", v.shape(), &[idx.len()]));
        }
        let cols = v.cols();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx.iter() {
            data.extend_from_slice(v.row_slice(i));
        }
        Ok(self.unary(
            Tensor {
                shape: vec![idx.len(), cols],
                data,
            },
            Op::GatherRows(self.id, idx),
        ))
    }

    pub fn row(self, r: usize) -> Result<Var<'g>> {
        self.narrow(0, r, 1)
    }

    /// Copy of `self` with row `r` replaced by `row`; every other row is
    /// carried over bit for bit.
    pub fn replace_row(self, r: usize, row: Var<'g>) -> Result<Var<'g>> {
        let (v, rv) = (self.value(), row.value());
        if v.rank() != 2 || r >= v.rows() || rv.numel() != v.cols() {
            return Err(Error::shape("replace_row", v.shape(), rv.shape()));
        }
        let cols = v.cols();
        let mut data = v.data().to_vec();
        data[r * cols..(r + 1) * cols].copy_from_slice(rv.data());
        let out = Tensor {
            shape: v.shape().to_vec(),
            data,
        };
        let rg = self.requires_grad() || row.requires_grad();
        Ok(self.graph.push(out, Op::ReplaceRow(self.id, r, row.id), rg))
    }

    /// Sum consecutive blocks of `k` rows: `(g·k) × c → g × c`.
    pub fn group_sum_rows(self, k: usize) -> Result<Var<'g>> {
        let v = self.value();
        if v.rank() != 2 || k == 0 || !v.rows().is_multiple_of(k) {
            return Err(Error::shape("group_sum_rows", v.shape(), &[k]));
        }
        let cols = v.cols();
        let groups = v.rows() / k;
        let mut data = vec![0.0; groups * cols];
        for r in 0..v.rows() {
            let g = r / k;
            for (acc, x) in data[g * cols..(g + 1) * cols].iter_mut().zip(v.row_slice(r)) {
                *acc += x;
            }
        }
        Ok(self.unary(
            Tensor {
                shape: vec![groups, cols],
                data,
            },
            Op::GroupSumRows(self.id, k),
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let v = self.value().reshape(shape)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    pub fn transpose(self) -> Result<Var<'g>> {
        let v = self.value();
        if v.rank() != 2 {
            return Err(Error::shape("transpose", v.shape(), &[]));
        }
        Ok(self.unary(transpose(&v), Op::Transpose(self.id)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central differences of a scalar function of one tensor.
    fn finite_diff(x: &Tensor, f: impl Fn(&Tensor) -> f64) -> Tensor {
        let h = 1e-5;
        let mut out = x.clone();
        for i in 0..x.numel() {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            out.data_mut()[i] = (f(&p) - f(&m)) / (2.0 * h);
        }
        out
    }

    fn max_rel_err(a: &Tensor, b: &Tensor) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
            .fold(0.0, f64::max)
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let g = Graph::new();
        let v = g.constant(Tensor::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap());
        let i = g.constant(Tensor::identity(3));
        assert_eq!(i.matmul(v).unwrap().value().data(), &[1.0, 2.0, 3.0]);
        let a = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let b = g.constant(Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap());
        let c = a.matmul(b).unwrap();
        assert_eq!(c.shape(), vec![2, 1]);
        assert_eq!(c.value().data(), &[3.0, 7.0]);
        match a.matmul(v) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 2]);
                assert_eq!(rhs, vec![3, 1]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn matmul_gradient_is_ones_times_b_transposed() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a0 = random(&[4, 5], &mut rng);
        let b0 = random(&[5, 2], &mut rng);
        let g = Graph::new();
        let a = g.param(a0.clone());
        let b = g.constant(b0.clone());
        let loss = a.matmul(b).unwrap().sum();
        let grad = g.backward(loss).unwrap().get(a);
        let expected = Tensor::ones(&[4, 2])
            .matmul(&transpose(&b0))
            .unwrap();
        assert!(max_rel_err(&grad, &expected) < 1e-12);
        let fd = finite_diff(&a0, |a| a.matmul(&b0).unwrap().sum());
        assert!(max_rel_err(&grad, &fd) < 1e-7);
    }

    #[test]
    fn elementwise_basics() {
        let g = Graph::new();
        let z = g.constant(Tensor::scalar(0.0));
        assert_eq!(z.sigmoid().value().item(), 0.5);
        assert_eq!(z.tanh().value().item(), 0.0);
        let a = g.constant(Tensor::row(&[1.0, 2.0]));
        let b = g.constant(Tensor::row(&[1.0, 2.0, 3.0]));
        assert!(a.add(b).is_err());
        assert!(a.mul(b).is_err());
        // scalar broadcast
        let s = g.constant(Tensor::scalar(2.0));
        assert_eq!(a.mul(s).unwrap().value().data(), &[2.0, 4.0]);
        assert_eq!(s.sub(a).unwrap().value().data(), &[1.0, 0.0]);
    }

    #[test]
    fn sigmoid_derivative_matches_finite_difference() {
        let g = Graph::new();
        let x = g.param(Tensor::scalar(1.0));
        let grad = g.backward(x.sigmoid()).unwrap().get(x).item();
        let h = 1e-5;
        let fd = (sigmoid(1.0 + h) - sigmoid(1.0 - h)) / (2.0 * h);
        assert!((grad - fd).abs() < 1e-7);
    }

    #[test]
    fn concat_cases() {
        let g = Graph::new();
        let a = g.param(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let single = g.concat(&[a], 0).unwrap();
        assert_eq!(single.value().data(), a.value().data());

        let ones = g.param(Tensor::ones(&[2]));
        let zeros = g.param(Tensor::zeros(&[3]));
        let c = g.concat(&[ones, zeros], 0).unwrap();
        assert_eq!(c.value().data(), &[1.0, 1.0, 0.0, 0.0, 0.0]);
        let grads = g.backward(c.sum()).unwrap();
        assert_eq!(grads.get(ones).data(), &[1.0, 1.0]);
        assert_eq!(grads.get(zeros).data(), &[1.0, 1.0, 1.0]);

        let m = g.constant(Tensor::zeros(&[2, 2]));
        let n = g.constant(Tensor::zeros(&[3, 2]));
        assert!(g.concat(&[m, n], 1).is_err());
        assert_eq!(g.concat(&[m, n], 0).unwrap().shape(), vec![5, 2]);
    }

    #[test]
    fn column_concat_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a0 = random(&[3, 2], &mut rng);
        let b0 = random(&[3, 4], &mut rng);
        let w0 = random(&[6, 1], &mut rng);
        let g = Graph::new();
        let a = g.param(a0.clone());
        let b = g.param(b0.clone());
        let w = g.constant(w0.clone());
        let loss = g.concat(&[a, b], 1).unwrap().matmul(w).unwrap().tanh().sum();
        let grads = g.backward(loss).unwrap();
        let f = |a: &Tensor, b: &Tensor| {
            let gg = Graph::new();
            let c = gg.concat(&[gg.constant(a.clone()), gg.constant(b.clone())], 1).unwrap();
            c.matmul(gg.constant(w0.clone())).unwrap().tanh().sum().value().item()
        };
        assert!(max_rel_err(&grads.get(a), &finite_diff(&a0, |x| f(x, &b0))) < 1e-6);
        assert!(max_rel_err(&grads.get(b), &finite_diff(&b0, |x| f(&a0, x))) < 1e-6);
    }

    #[test]
    fn softmax_cases() {
        let g = Graph::new();
        let c = g.constant(Tensor::new(vec![3], vec![0.7; 3]).unwrap());
        for p in c.softmax().unwrap().value().data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = g.constant(Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap());
        let s = big.softmax().unwrap().value();
        assert!((s.data()[0] - 1.0).abs() < 1e-12 && s.data()[1] >= 0.0 && s.data()[1] < 1e-12);
        let nan = g.constant(Tensor::new(vec![2], vec![f64::NAN, 0.0]).unwrap());
        assert!(matches!(nan.softmax(), Err(Error::Numeric(_))));
        let m = g.constant(Tensor::zeros(&[2, 2]));
        assert!(m.softmax().is_err());
    }

    #[test]
    fn softmax_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = random(&[5], &mut rng);
        for k in 0..5 {
            let g = Graph::new();
            let x = g.param(x0.clone());
            let out = x.softmax().unwrap().narrow(0, k, 1).unwrap().sum();
            let grad = g.backward(out).unwrap().get(x);
            let fd = finite_diff(&x0, |x| {
                let gg = Graph::new();
                gg.constant(x.clone()).softmax().unwrap().value().data()[k]
            });
            assert!(max_rel_err(&grad, &fd) < 1e-5, "row {k}");
        }
    }

    #[test]
    fn backward_contracts() {
        let g = Graph::new();
        let w = g.param(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let unused = g.param(Tensor::ones(&[2]));
        assert!(matches!(g.backward(w), Err(Error::Contract(_))));
        let grads = g.backward(w.sum()).unwrap();
        assert_eq!(grads.get(w).data(), &[1.0, 1.0, 1.0]);
        assert_eq!(grads.get(unused).data(), &[0.0, 0.0]);
        let sq = w.square().unwrap().sum();
        assert_eq!(g.backward(sq).unwrap().get(w).data(), &[2.0, -4.0, 1.0]);
    }

    fn structural_chain<'g>(x: Var<'g>, r: Var<'g>, idx: &Rc<[usize]>) -> Var<'g> {
        x.replace_row(2, r)
            .unwrap()
            .gather_rows(idx.clone())
            .unwrap()
            .group_sum_rows(2)
            .unwrap()
            .add_row(r)
            .unwrap()
            .matmul(x.narrow(0, 1, 3).unwrap().transpose().unwrap().transpose().unwrap())
            .unwrap()
            .reshape(&[12])
            .unwrap()
            .powf(2.0)
            .sum()
    }

    #[test]
    fn structural_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x0 = random(&[8, 3], &mut rng);
        let r0 = random(&[1, 3], &mut rng);
        let idx: Rc<[usize]> = Rc::from(vec![7, 0, 0, 3, 5, 1, 2, 6]);
        let g = Graph::new();
        let x = g.param(x0.clone());
        let r = g.param(r0.clone());
        let grads = g.backward(structural_chain(x, r, &idx)).unwrap();
        let eval = |x: &Tensor, r: &Tensor| {
            let gg = Graph::new();
            let out = structural_chain(gg.constant(x.clone()), gg.constant(r.clone()), &idx);
            out.value().item()
        };
        assert!(max_rel_err(&grads.get(x), &finite_diff(&x0, |t| eval(t, &r0))) < 1e-6);
        assert!(max_rel_err(&grads.get(r), &finite_diff(&r0, |t| eval(&x0, t))) < 1e-6);
    }

    #[test]
    fn lerp_and_clamp_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let z0 = random(&[2, 3], &mut rng).map(sigmoid);
        let a0 = random(&[2, 3], &mut rng);
        let b0 = random(&[2, 3], &mut rng);
        let f = |z: &Tensor, a: &Tensor, b: &Tensor| {
            let g = Graph::new();
            let v = g
                .constant(a.clone())
                .lerp(g.constant(z.clone()), g.constant(b.clone()))
                .unwrap()
                .clamp_min(-0.2)
                .mean();
            v.value().item()
        };
        let g = Graph::new();
        let (z, a, b) = (g.param(z0.clone()), g.param(a0.clone()), g.param(b0.clone()));
        let y = a.lerp(z, b).unwrap().clamp_min(-0.2).mean();
        let grads = g.backward(y).unwrap();
        assert!(max_rel_err(&grads.get(z), &finite_diff(&z0, |t| f(t, &a0, &b0))) < 1e-6);
        assert!(max_rel_err(&grads.get(a), &finite_diff(&a0, |t| f(&z0, t, &b0))) < 1e-6);
        assert!(max_rel_err(&grads.get(b), &finite_diff(&b0, |t| f(&z0, &a0, t))) < 1e-6);
    }

    #[test]
    fn replay_gives_identical_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w0 = random(&[3, 3], &mut rng);
        let run = || {
            let g = Graph::new();
            let w = g.param(w0.clone());
            let y = w.matmul(w).unwrap().tanh().sum();
            g.backward(y).unwrap().get(w)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn fault_injection_changes_sigmoid_rule() {
        let g = Graph::new();
        let x = g.param(Tensor::scalar(0.3));
        let y = x.sigmoid();
        let clean = g.backward(y).unwrap().get(x).item();
        inject_sigmoid_backward_fault(Some(2.0));
        let broken = g.backward(y).unwrap().get(x).item();
        inject_sigmoid_backward_fault(None);
        assert!((broken - 2.0 * clean).abs() < 1e-15);
    }
}
