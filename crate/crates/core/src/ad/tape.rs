//! Reverse-mode gradient tape over dense tensors.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and backward is a single reverse sweep. Every op checks
//! its result for NaN/Inf and refuses to record it.

use std::cell::{Ref, RefCell};
use std::sync::atomic::{AtomicUsize, Ordering};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::real::Real;

static NEXT_TAPE_ID: AtomicUsize = AtomicUsize::new(0);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Unary {
    Neg,
    Exp,
    Log,
    Tanh,
    Softplus,
    Abs,
    Square,
    Sqrt,
}

enum Op<T> {
    Leaf,
    Binary { kind: Binary, a: usize, b: usize },
    Unary { kind: Unary, a: usize },
    Scale { a: usize, c: T },
    AddScalar { a: usize },
    MatMul { a: usize, b: usize },
    Softmax { a: usize, axis: usize },
    Sum { a: usize, axis: usize },
    SumAll { a: usize },
    Concat { inputs: Vec<usize>, axis: usize },
    Slice { a: usize, axis: usize, start: usize },
    Gather { a: usize, idx: Vec<usize> },
    TakeCols { a: usize, cols: Vec<usize> },
    Reshape { a: usize },
    Select { mask: Vec<bool>, a: usize, b: usize },
    RowFn { a: usize, jac: Vec<T> },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Operation kinds accepted by [`Tape::record`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    MatMul,
    Exp,
    Log,
    Tanh,
    Softplus,
    Softmax(usize),
    Sum(usize),
    Mean(usize),
    Abs,
    Square,
    Sqrt,
    Concat(usize),
    Slice { axis: usize, start: usize, end: usize },
    Gather(Vec<usize>),
}

/// A recording of tensor operations supporting one or more backward sweeps.
pub struct Tape<T: Real> {
    id: usize,
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients of one backward sweep, keyed by leaf.
pub struct Gradients<T> {
    tape_id: usize,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the root with respect to `v`; `None` if `v` is not a
    /// gradient-tracking leaf reachable from the root.
    pub fn wrt(&self, v: Var<'_, T>) -> Option<&[T]> {
        if v.tape.id != self.tape_id {
            return None;
        }
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }
}

fn axis_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn is_suffix(short: &[usize], long: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(
        &self,
        op_name: &'static str,
        shape: Vec<usize>,
        value: Vec<T>,
        op: Op<T>,
        needs_grad: bool,
    ) -> Result<Var<'_, T>> {
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    /// Registers a tensor as a leaf; it tracks gradients iff the tensor does.
    pub fn leaf(&self, t: &Tensor<T>) -> Result<Var<'_, T>> {
        self.push(
            "leaf",
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    /// Registers a value that never receives gradients.
    pub fn constant(&self, t: Tensor<T>) -> Result<Var<'_, T>> {
        let shape = t.shape().to_vec();
        self.push("constant", shape, t.into_data(), Op::Leaf, false)
    }

    pub fn scalar(&self, v: T) -> Result<Var<'_, T>> {
        self.constant(Tensor::scalar(v))
    }

    /// Generic entry point that dispatches an [`OpKind`] over its inputs.
    pub fn record<'t>(&'t self, kind: &OpKind, inputs: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let arity = match kind {
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div | OpKind::MatMul => 2,
            OpKind::Concat(_) => inputs.len().max(1),
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::Invalid(format!(
                "{kind:?} expects {arity} inputs, got {}",
                inputs.len()
            )));
        }
        let a = inputs[0];
        match kind {
            OpKind::Add => a.add(inputs[1]),
            OpKind::Sub => a.sub(inputs[1]),
            OpKind::Mul => a.mul(inputs[1]),
            OpKind::Div => a.div(inputs[1]),
            OpKind::MatMul => a.matmul(inputs[1]),
            OpKind::Neg => a.neg(),
            OpKind::Exp => a.exp(),
            OpKind::Log => a.log(),
            OpKind::Tanh => a.tanh(),
            OpKind::Softplus => a.softplus(),
            OpKind::Softmax(axis) => a.softmax(*axis),
            OpKind::Sum(axis) => a.sum(*axis),
            OpKind::Mean(axis) => a.mean(*axis),
            OpKind::Abs => a.abs(),
            OpKind::Square => a.square(),
            OpKind::Sqrt => a.sqrt(),
            OpKind::Concat(axis) => self.concat(inputs, *axis),
            OpKind::Slice { axis, start, end } => a.slice(*axis, *start, *end),
            OpKind::Gather(idx) => a.gather(idx),
        }
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat<'t>(&'t self, inputs: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Invalid("concat of zero tensors".into()))?;
        for v in inputs {
            self.check(*v)?;
        }
        let nodes = self.nodes.borrow();
        let base = &nodes[first.id].shape;
        if axis >= base.len() {
            return Err(Error::Invalid(format!("concat axis {axis} out of range")));
        }
        let mut total = 0;
        for v in inputs {
            let s = &nodes[v.id].shape;
            let compatible =
                s.len() == base.len() && s.iter().zip(base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.clone(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_dims(&shape, axis);
        let mut value = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let n = &nodes[v.id];
                let len = n.shape[axis] * inner;
                value.extend_from_slice(&n.value[o * len..(o + 1) * len]);
            }
        }
        let needs = inputs.iter().any(|v| nodes[v.id].needs_grad);
        let ids = inputs.iter().map(|v| v.id).collect();
        drop(nodes);
        self.push("concat", shape, value, Op::Concat { inputs: ids, axis }, needs)
    }

    /// Chooses elementwise between `a` (where `mask` is true) and `b`.
    pub fn select<'t>(&'t self, mask: &[bool], a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check(a)?;
        self.check(b)?;
        let nodes = self.nodes.borrow();
        let (na, nb) = (&nodes[a.id], &nodes[b.id]);
        if na.shape != nb.shape || mask.len() != na.value.len() {
            return Err(Error::Shape {
                op: "select",
                lhs: na.shape.clone(),
                rhs: nb.shape.clone(),
            });
        }
        let value = mask
            .iter()
            .zip(na.value.iter().zip(&nb.value))
            .map(|(&m, (&x, &y))| if m { x } else { y })
            .collect();
        let shape = na.shape.clone();
        let needs = na.needs_grad || nb.needs_grad;
        drop(nodes);
        self.push(
            "select",
            shape,
            value,
            Op::Select {
                mask: mask.to_vec(),
                a: a.id,
                b: b.id,
            },
            needs,
        )
    }

    pub(crate) fn check(&self, v: Var<'_, T>) -> Result<()> {
        if std::ptr::eq(v.tape, self) {
            Ok(())
        } else {
            Err(Error::NotOnTape)
        }
    }

    /// Reverse sweep from a scalar root. Each call returns fresh gradients;
    /// accumulating them into parameters is the caller's explicit choice.
    pub fn backward(&self, root: Var<'_, T>) -> Result<Gradients<T>> {
        self.check(root)?;
        let nodes = self.nodes.borrow();
        if !nodes[root.id].shape.is_empty() {
            return Err(Error::NotScalar(nodes[root.id].shape.clone()));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        grads[root.id] = Some(vec![T::one()]);

        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            propagate(&nodes, node, &g, &mut grads);
        }

        // Only leaves keep their gradients.
        for (id, node) in nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.needs_grad {
                grads[id] = None;
            } else if grads[id].is_none() && id <= root.id {
                grads[id] = Some(vec![T::zero(); node.value.len()]);
            }
        }
        Ok(Gradients {
            tape_id: self.id,
            grads,
        })
    }
}

fn acc<'a, T: Real>(grads: &'a mut [Option<Vec<T>>], nodes: &[Node<T>], id: usize) -> Option<&'a mut Vec<T>> {
    if !nodes[id].needs_grad {
        return None;
    }
    let len = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![T::zero(); len]))
}

fn propagate<T: Real>(nodes: &[Node<T>], node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
    match &node.op {
        Op::Leaf => {}
        Op::Binary { kind, a, b } => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (la, lb) = (av.len(), bv.len());
            if let Some(ga) = acc(grads, nodes, *a) {
                for (i, &gi) in g.iter().enumerate() {
                    let d = match kind {
                        Binary::Add | Binary::Sub => gi,
                        Binary::Mul => gi * bv[i % lb],
                        Binary::Div => gi / bv[i % lb],
                    };
                    ga[i % la] += d;
                }
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                for (i, &gi) in g.iter().enumerate() {
                    let d = match kind {
                        Binary::Add => gi,
                        Binary::Sub => -gi,
                        Binary::Mul => gi * av[i % la],
                        Binary::Div => {
                            let y = bv[i % lb];
                            -gi * av[i % la] / (y * y)
                        }
                    };
                    gb[i % lb] += d;
                }
            }
        }
        Op::Unary { kind, a } => {
            let x = &nodes[*a].value;
            let y = &node.value;
            if let Some(ga) = acc(grads, nodes, *a) {
                for i in 0..g.len() {
                    let d = match kind {
                        Unary::Neg => -T::one(),
                        Unary::Exp => y[i],
                        Unary::Log => T::one() / x[i],
                        Unary::Tanh => T::one() - y[i] * y[i],
                        Unary::Softplus => sigmoid(x[i]),
                        Unary::Abs => x[i].signum_or_zero(),
                        Unary::Square => T::c(2.0) * x[i],
                        Unary::Sqrt => T::c(0.5) / y[i],
                    };
                    ga[i] += g[i] * d;
                }
            }
        }
        Op::Scale { a, c } => {
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, &gi)| *x += gi * *c);
            }
        }
        Op::AddScalar { a } | Op::Reshape { a } => {
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, &gi)| *x += gi);
            }
        }
        Op::MatMul { a, b } => {
            let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
            let n = nodes[*b].shape[1];
            let bv = &nodes[*b].value;
            if let Some(ga) = acc(grads, nodes, *a) {
                // dA = dC B^T
                T::gemm(
                    m,
                    n,
                    k,
                    T::one(),
                    g,
                    n as isize,
                    1,
                    bv,
                    1,
                    n as isize,
                    T::one(),
                    ga,
                    k as isize,
                    1,
                );
            }
            let av = &nodes[*a].value;
            if let Some(gb) = acc(grads, nodes, *b) {
                // dB = A^T dC
                T::gemm(
                    k,
                    m,
                    n,
                    T::one(),
                    av,
                    1,
                    k as isize,
                    g,
                    n as isize,
                    1,
                    T::one(),
                    gb,
                    n as isize,
                    1,
                );
            }
        }
        Op::Softmax { a, axis } => {
            let (outer, n, inner) = axis_dims(&node.shape, *axis);
            let y = &node.value;
            if let Some(ga) = acc(grads, nodes, *a) {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * n * inner + j * inner + i;
                        let s: T = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..n {
                            ga[at(j)] += y[at(j)] * (g[at(j)] - s);
                        }
                    }
                }
            }
        }
        Op::Sum { a, axis } => {
            let (outer, n, inner) = axis_dims(&nodes[*a].shape, *axis);
            if let Some(ga) = acc(grads, nodes, *a) {
                for o in 0..outer {
                    for j in 0..n {
                        for i in 0..inner {
                            ga[o * n * inner + j * inner + i] += g[o * inner + i];
                        }
                    }
                }
            }
        }
        Op::SumAll { a } => {
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
        }
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = axis_dims(&node.shape, *axis);
            let mut offset = 0;
            for &id in inputs {
                let w = nodes[id].shape[*axis];
                if let Some(gi) = acc(grads, nodes, id) {
                    for o in 0..outer {
                        let src = &g[o * total * inner + offset * inner..][..w * inner];
                        let dst = &mut gi[o * w * inner..][..w * inner];
                        dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                    }
                }
                offset += w;
            }
        }
        Op::Slice { a, axis, start } => {
            let (outer, n, inner) = axis_dims(&nodes[*a].shape, *axis);
            let w = node.shape[*axis];
            if let Some(ga) = acc(grads, nodes, *a) {
                for o in 0..outer {
                    let dst = &mut ga[o * n * inner + start * inner..][..w * inner];
                    let src = &g[o * w * inner..][..w * inner];
                    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                }
            }
        }
        Op::Gather { a, idx } => {
            let m = nodes[*a].shape[1];
            if let Some(ga) = acc(grads, nodes, *a) {
                for (r, &j) in idx.iter().enumerate() {
                    ga[r * m + j] += g[r];
                }
            }
        }
        Op::TakeCols { a, cols } => {
            let m = nodes[*a].shape[1];
            let k = cols.len();
            if let Some(ga) = acc(grads, nodes, *a) {
                for r in 0..node.shape[0] {
                    for (c, &j) in cols.iter().enumerate() {
                        ga[r * m + j] += g[r * k + c];
                    }
                }
            }
        }
        Op::Select { mask, a, b } => {
            if let Some(ga) = acc(grads, nodes, *a) {
                for (i, &m) in mask.iter().enumerate() {
                    if m {
                        ga[i] += g[i];
                    }
                }
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                for (i, &m) in mask.iter().enumerate() {
                    if !m {
                        gb[i] += g[i];
                    }
                }
            }
        }
        Op::RowFn { a, jac } => {
            let d = nodes[*a].shape[1];
            if let Some(ga) = acc(grads, nodes, *a) {
                for (r, &gr) in g.iter().enumerate() {
                    for c in 0..d {
                        ga[r * d + c] += gr * jac[r * d + c];
                    }
                }
            }
        }
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log(1 + exp(x))` without overflow.
pub(crate) fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

trait SignumOrZero {
    fn signum_or_zero(self) -> Self;
}

impl<T: Real> SignumOrZero for T {
    fn signum_or_zero(self) -> Self {
        if self > T::zero() {
            T::one()
        } else if self < T::zero() {
            -T::one()
        } else {
            T::zero()
        }
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    fn node(&self) -> Ref<'_, Node<T>> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id])
    }

    pub fn shape(&self) -> Vec<usize> {
        self.node().shape.clone()
    }

    pub fn value(&self) -> Vec<T> {
        self.node().value.clone()
    }

    /// Borrowed view of the value, for reads that should not copy.
    pub fn with_value<R>(&self, f: impl FnOnce(&[T]) -> R) -> R {
        f(&self.node().value)
    }

    pub fn scalar_value(&self) -> T {
        self.node().value[0]
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        let n = self.node();
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    fn binary(self, other: Var<'t, T>, kind: Binary, name: &'static str) -> Result<Var<'t, T>> {
        self.tape.check(other)?;
        let nodes = self.tape.nodes.borrow();
        let (na, nb) = (&nodes[self.id], &nodes[other.id]);
        let shape = if na.shape == nb.shape || is_suffix(&nb.shape, &na.shape) {
            na.shape.clone()
        } else if is_suffix(&na.shape, &nb.shape) {
            nb.shape.clone()
        } else {
            return Err(Error::Shape {
                op: name,
                lhs: na.shape.clone(),
                rhs: nb.shape.clone(),
            });
        };
        if kind == Binary::Div && nb.value.iter().any(|v| *v == T::zero()) {
            return Err(Error::Domain { op: name, operand: 1 });
        }
        let n: usize = shape.iter().product();
        let (la, lb) = (na.value.len(), nb.value.len());
        let mut value = Vec::with_capacity(n);
        for i in 0..n {
            let (x, y) = (na.value[i % la], nb.value[i % lb]);
            value.push(match kind {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
                Binary::Div => x / y,
            });
        }
        let needs = na.needs_grad || nb.needs_grad;
        drop(nodes);
        self.tape.push(
            name,
            shape,
            value,
            Op::Binary {
                kind,
                a: self.id,
                b: other.id,
            },
            needs,
        )
    }

    fn unary(self, kind: Unary, name: &'static str) -> Result<Var<'t, T>> {
        let node = self.node();
        let domain_ok = match kind {
            Unary::Log => node.value.iter().all(|&v| v > T::zero()),
            Unary::Sqrt => node.value.iter().all(|&v| v >= T::zero()),
            _ => true,
        };
        if !domain_ok {
            return Err(Error::Domain { op: name, operand: 0 });
        }
        let value: Vec<T> = node
            .value
            .iter()
            .map(|&x| match kind {
                Unary::Neg => -x,
                Unary::Exp => x.exp(),
                Unary::Log => x.ln(),
                Unary::Tanh => x.tanh(),
                Unary::Softplus => softplus(x),
                Unary::Abs => x.abs(),
                Unary::Square => x * x,
                Unary::Sqrt => x.sqrt(),
            })
            .collect();
        if kind == Unary::Sqrt && value.iter().any(|v| *v == T::zero()) && node.needs_grad {
            // The derivative at zero is unbounded.
            return Err(Error::Domain { op: name, operand: 0 });
        }
        let (shape, needs) = (node.shape.clone(), node.needs_grad);
        drop(node);
        self.tape
            .push(name, shape, value, Op::Unary { kind, a: self.id }, needs)
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, Binary::Add, "add")
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, Binary::Sub, "sub")
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, Binary::Mul, "mul")
    }

    pub fn div(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, Binary::Div, "div")
    }

    pub fn neg(self) -> Result<Var<'t, T>> {
        self.unary(Unary::Neg, "neg")
    }

    pub fn exp(self) -> Result<Var<'t, T>> {
        self.unary(Unary::Exp, "exp")
    }

    pub fn log(self) -> Result<Var<'t, T>> {
        self.unary(Unary::Log, "log")
    }

    pub fn tanh(self) -> Result<Var<'t, T>> {
        self.unary(Unary::Tanh, "tanh")
    }

    pub fn softplus(self) -> Result<Var<'t, T>> {
        self.unary(Unary::Softplus, "softplus")
    }

    pub fn abs(self) -> Result<Var<'t, T>> {
        self.unary(Unary::Abs, "abs")
    }

    pub fn square(self) -> Result<Var<'t, T>> {
        self.unary(Unary::Square, "square")
    }

    pub fn sqrt(self) -> Result<Var<'t, T>> {
        self.unary(Unary::Sqrt, "sqrt")
    }

    pub fn scale(self, c: T) -> Result<Var<'t, T>> {
        let node = self.node();
        let value = node.value.iter().map(|&x| x * c).collect();
        let (shape, needs) = (node.shape.clone(), node.needs_grad);
        drop(node);
        self.tape
            .push("scale", shape, value, Op::Scale { a: self.id, c }, needs)
    }

    pub fn add_scalar(self, c: T) -> Result<Var<'t, T>> {
        let node = self.node();
        let value = node.value.iter().map(|&x| x + c).collect();
        let (shape, needs) = (node.shape.clone(), node.needs_grad);
        drop(node);
        self.tape
            .push("add_scalar", shape, value, Op::AddScalar { a: self.id }, needs)
    }

    /// `1 - x`.
    pub fn one_minus(self) -> Result<Var<'t, T>> {
        self.scale(-T::one())?.add_scalar(T::one())
    }

    /// Rank-2 matrix product.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.tape.check(other)?;
        let nodes = self.tape.nodes.borrow();
        let (na, nb) = (&nodes[self.id], &nodes[other.id]);
        if na.shape.len() != 2 || nb.shape.len() != 2 || na.shape[1] != nb.shape[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: na.shape.clone(),
                rhs: nb.shape.clone(),
            });
        }
        let (m, k, n) = (na.shape[0], na.shape[1], nb.shape[1]);
        let mut value = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            &na.value,
            k as isize,
            1,
            &nb.value,
            n as isize,
            1,
            T::zero(),
            &mut value,
            n as isize,
            1,
        );
        let needs = na.needs_grad || nb.needs_grad;
        drop(nodes);
        self.tape.push(
            "matmul",
            vec![m, n],
            value,
            Op::MatMul {
                a: self.id,
                b: other.id,
            },
            needs,
        )
    }

    fn check_axis(&self, axis: usize, op: &'static str) -> Result<Vec<usize>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::Shape {
                op,
                lhs: shape,
                rhs: vec![axis],
            });
        }
        Ok(shape)
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'t, T>> {
        let shape = self.check_axis(axis, "softmax")?;
        let (outer, n, inner) = axis_dims(&shape, axis);
        let node = self.node();
        let x = &node.value;
        let mut value = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let m = (0..n).map(|j| x[at(j)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for j in 0..n {
                    let e = (x[at(j)] - m).exp();
                    value[at(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    value[at(j)] /= z;
                }
            }
        }
        let needs = node.needs_grad;
        drop(node);
        self.tape
            .push("softmax", shape, value, Op::Softmax { a: self.id, axis }, needs)
    }

    /// Sum over `axis`, removing it from the shape.
    pub fn sum(self, axis: usize) -> Result<Var<'t, T>> {
        let shape = self.check_axis(axis, "sum")?;
        let (outer, n, inner) = axis_dims(&shape, axis);
        let node = self.node();
        let mut value = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                for i in 0..inner {
                    value[o * inner + i] += node.value[o * n * inner + j * inner + i];
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let needs = node.needs_grad;
        drop(node);
        self.tape
            .push("sum", out_shape, value, Op::Sum { a: self.id, axis }, needs)
    }

    pub fn mean(self, axis: usize) -> Result<Var<'t, T>> {
        let n = self.check_axis(axis, "mean")?[axis];
        if n == 0 {
            return Err(Error::Invalid("mean over an empty axis".into()));
        }
        self.sum(axis)?.scale(T::one() / T::c(n as f64))
    }

    pub fn sum_all(self) -> Result<Var<'t, T>> {
        let node = self.node();
        let s: T = node.value.iter().copied().sum();
        let needs = node.needs_grad;
        drop(node);
        self.tape
            .push("sum_all", vec![], vec![s], Op::SumAll { a: self.id }, needs)
    }

    pub fn mean_all(self) -> Result<Var<'t, T>> {
        let n = self.node().value.len();
        if n == 0 {
            return Err(Error::Invalid("mean of an empty tensor".into()));
        }
        self.sum_all()?.scale(T::one() / T::c(n as f64))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Var<'t, T>> {
        let shape = self.check_axis(axis, "slice")?;
        if start > end || end > shape[axis] {
            return Err(Error::Shape {
                op: "slice",
                lhs: shape,
                rhs: vec![start, end],
            });
        }
        let (outer, n, inner) = axis_dims(&shape, axis);
        let w = end - start;
        let node = self.node();
        let mut value = Vec::with_capacity(outer * w * inner);
        for o in 0..outer {
            value.extend_from_slice(&node.value[o * n * inner + start * inner..][..w * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = w;
        let needs = node.needs_grad;
        drop(node);
        self.tape.push(
            "slice",
            out_shape,
            value,
            Op::Slice {
                a: self.id,
                axis,
                start,
            },
            needs,
        )
    }

    /// Picks one entry per row of a matrix: `out[r] = self[r, idx[r]]`.
    pub fn gather(self, idx: &[usize]) -> Result<Var<'t, T>> {
        let shape = self.shape();
        if shape.len() != 2 || shape[0] != idx.len() || idx.iter().any(|&j| j >= shape[1]) {
            return Err(Error::Shape {
                op: "gather",
                lhs: shape,
                rhs: vec![idx.len()],
            });
        }
        let m = shape[1];
        let node = self.node();
        let value = idx.iter().enumerate().map(|(r, &j)| node.value[r * m + j]).collect();
        let needs = node.needs_grad;
        drop(node);
        self.tape.push(
            "gather",
            vec![idx.len()],
            value,
            Op::Gather {
                a: self.id,
                idx: idx.to_vec(),
            },
            needs,
        )
    }

    /// Column selection / permutation of a matrix.
    pub fn take_cols(self, cols: &[usize]) -> Result<Var<'t, T>> {
        let shape = self.shape();
        if shape.len() != 2 || cols.iter().any(|&j| j >= shape[1]) {
            return Err(Error::Shape {
                op: "take_cols",
                lhs: shape,
                rhs: cols.to_vec(),
            });
        }
        let (n, m) = (shape[0], shape[1]);
        let node = self.node();
        let mut value = Vec::with_capacity(n * cols.len());
        for r in 0..n {
            for &j in cols {
                value.push(node.value[r * m + j]);
            }
        }
        let needs = node.needs_grad;
        drop(node);
        self.tape.push(
            "take_cols",
            vec![n, cols.len()],
            value,
            Op::TakeCols {
                a: self.id,
                cols: cols.to_vec(),
            },
            needs,
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let node = self.node();
        if shape.iter().product::<usize>() != node.value.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: node.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let (value, needs) = (node.value.clone(), node.needs_grad);
        drop(node);
        self.tape
            .push("reshape", shape.to_vec(), value, Op::Reshape { a: self.id }, needs)
    }

    /// Column `j` of a matrix as a vector.
    pub fn column(self, j: usize) -> Result<Var<'t, T>> {
        let n = self.shape()[0];
        self.slice(1, j, j + 1)?.reshape(&[n])
    }

    /// Records a row-wise scalar function whose values and per-row gradients
    /// were computed outside this tape: `out[r] = values[r]`,
    /// `d out[r] / d self[r, c] = jac[r, c]`.
    pub fn row_fn(self, values: Vec<T>, jac: Vec<T>) -> Result<Var<'t, T>> {
        let shape = self.shape();
        if shape.len() != 2 || values.len() != shape[0] || jac.len() != shape[0] * shape[1] {
            return Err(Error::Shape {
                op: "row_fn",
                lhs: shape,
                rhs: vec![values.len(), jac.len()],
            });
        }
        let needs = self.node().needs_grad;
        self.tape.push(
            "row_fn",
            vec![values.len()],
            values,
            Op::RowFn { a: self.id, jac },
            needs,
        )
    }
}
