//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every primitive applied to its [`Var`] handles
//! (define-by-run). Calling [`Tape::backward`] on a scalar walks the tape in
//! reverse and returns a [`Gradients`] map. Tapes are cheap and meant to be
//! rebuilt for every training step.
//!
//! Shapes are row-major. Operations that act "per row" (softmax, log-softmax,
//! concat, gather) treat the last dimension as columns and every other
//! dimension as rows.

use std::cell::RefCell;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Dense row-major tensor with an optional gradient slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    node: Option<Var>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::invalid(format!(
                "tensor shape must be non-empty with positive dims, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(format!(
                "tensor shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
            node: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![0.0; n]).expect("zeros: invalid shape")
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![value; n]).expect("filled: invalid shape")
    }

    /// A `[1, n]` row vector.
    pub fn row(data: Vec<f64>) -> Self {
        Self::new(vec![1, data.len()], data).expect("row: empty data")
    }

    /// A `[rows, cols]` matrix.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(vec![1], vec![value]).expect("scalar")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    /// Product of every dimension except the last.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::shape("set_grad", &self.shape, &[grad.len()]));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Tape handle this value was read from, if any.
    pub fn node(&self) -> Option<Var> {
        self.node
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    /// Position of this node on its tape.
    pub fn id(&self) -> usize {
        self.index
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    None,
    Row,
    Scalar,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize, Broadcast),
    Sub(usize, usize, Broadcast),
    Mul(usize, usize, Broadcast),
    Scale(usize, f64),
    MatMul(usize, usize),
    Transpose(usize),
    Affine(usize, usize, usize),
    Concat(Vec<usize>),
    ConcatRows(Vec<usize>),
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    Softmax(usize),
    LogSoftmax(usize),
    GatherRows(usize, Vec<usize>),
    GatherCols(usize, Vec<usize>),
    Pick(usize, Vec<usize>),
    Sum(usize),
    Mean(usize),
    StraightThrough(usize, usize),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Named primitive applications, for callers that dispatch dynamically.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Scale(f64),
    MatMul,
    Transpose,
    Affine,
    Concat,
    ConcatRows,
    Tanh,
    Sigmoid,
    Exp,
    Softmax,
    LogSoftmax,
    /// Embedding-row lookup: gathers the listed rows of a table.
    Lookup(Vec<usize>),
    /// Gathers the listed columns of every row.
    Gather(Vec<usize>),
    /// Picks one column per row.
    Pick(Vec<usize>),
    Sum,
    Mean,
    StraightThrough,
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Scale(_) => "scale",
            Primitive::MatMul => "matmul",
            Primitive::Transpose => "transpose",
            Primitive::Affine => "affine",
            Primitive::Concat => "concat",
            Primitive::ConcatRows => "concat_rows",
            Primitive::Tanh => "tanh",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Exp => "exp",
            Primitive::Softmax => "softmax",
            Primitive::LogSoftmax => "log_softmax",
            Primitive::Lookup(_) => "lookup",
            Primitive::Gather(_) => "gather",
            Primitive::Pick(_) => "pick",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::StraightThrough => "straight_through",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Primitive::Add
            | Primitive::Sub
            | Primitive::Mul
            | Primitive::MatMul
            | Primitive::StraightThrough => Some(2),
            Primitive::Affine => Some(3),
            Primitive::Concat | Primitive::ConcatRows => None,
            _ => Some(1),
        }
    }
}

impl FromStr for Primitive {
    type Err = Error;

    /// Parses the names of parameter-free primitives. `scale`, `lookup`,
    /// `gather` and `pick` carry arguments and must be built directly.
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "add" => Primitive::Add,
            "sub" => Primitive::Sub,
            "mul" => Primitive::Mul,
            "matmul" => Primitive::MatMul,
            "transpose" => Primitive::Transpose,
            "affine" => Primitive::Affine,
            "concat" => Primitive::Concat,
            "concat_rows" => Primitive::ConcatRows,
            "tanh" => Primitive::Tanh,
            "sigmoid" => Primitive::Sigmoid,
            "exp" => Primitive::Exp,
            "softmax" => Primitive::Softmax,
            "log_softmax" => Primitive::LogSoftmax,
            "sum" => Primitive::Sum,
            "mean" => Primitive::Mean,
            "straight_through" => Primitive::StraightThrough,
            "scale" | "lookup" | "gather" | "pick" => {
                return Err(Error::invalid(format!(
                    "primitive `{s}` takes arguments; construct it directly"
                )))
            }
            other => return Err(Error::UnknownPrimitive(other.to_string())),
        })
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Define-by-run tape of primitive applications.
pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
    /// Soft inputs seen by `straight_through`, in call order.
    soft_seen: RefCell<Vec<Tensor>>,
    /// When set, `straight_through` computes `hard + soft - frozen[i]`.
    frozen_soft: Option<Vec<Tensor>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("id", &self.id)
            .field("len", &self.len())
            .finish()
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

fn log_softmax_rows(x: &Tensor) -> Vec<f64> {
    let c = x.cols();
    let mut out = Vec::with_capacity(x.len());
    for row in x.data.chunks(c) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|&v| v - lse));
    }
    out
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// `c[m,n] += a[m,k] * b[k,n]`
fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `ga[m,k] += g[m,n] * b[k,n]^T`
fn matmul_bt_acc(g: &[f64], b: &[f64], ga: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `gb[k,n] += a[m,k]^T * g[m,n]`
fn matmul_at_acc(a: &[f64], g: &[f64], gb: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let gbrow = &mut gb[p * n..(p + 1) * n];
            for (gv, x) in gbrow.iter_mut().zip(grow) {
                *gv += av * x;
            }
        }
    }
}

fn reduce_broadcast(g: &[f64], mode: Broadcast, cols: usize, out: &mut [f64]) {
    match mode {
        Broadcast::None => add_into(out, g),
        Broadcast::Row => {
            for row in g.chunks(cols) {
                add_into(out, row);
            }
        }
        Broadcast::Scalar => out[0] += g.iter().sum::<f64>(),
    }
}

fn broadcast_index(mode: Broadcast, i: usize, cols: usize) -> usize {
    match mode {
        Broadcast::None => i,
        Broadcast::Row => i % cols,
        Broadcast::Scalar => 0,
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
            soft_seen: RefCell::new(Vec::new()),
            frozen_soft: None,
        }
    }

    /// A tape whose straight-through nodes are the explicit surrogate
    /// `hard + soft - frozen`, with `frozen` the soft values of a reference
    /// pass. Differentiating it numerically gives the straight-through gradient.
    pub fn with_frozen_soft(frozen: Vec<Tensor>) -> Self {
        Self {
            frozen_soft: Some(frozen),
            ..Self::new()
        }
    }

    /// Soft values passed to `straight_through` so far.
    pub fn soft_values(&self) -> Vec<Tensor> {
        self.soft_seen.borrow().clone()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn leaf(&self, value: Arc<Tensor>, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var {
            tape: self.id,
            index: nodes.len() - 1,
        }
    }

    /// Records a differentiable leaf.
    pub fn param(&self, value: &Tensor) -> Var {
        self.param_shared(Arc::new(strip(value)))
    }

    /// Records a differentiable leaf without copying its buffer.
    pub fn param_shared(&self, value: Arc<Tensor>) -> Var {
        self.leaf(value, true)
    }

    /// Records a non-differentiable leaf.
    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(Arc::new(strip(&value)), false)
    }

    pub fn constant_shared(&self, value: Arc<Tensor>) -> Var {
        self.leaf(value, false)
    }

    pub fn zeros(&self, shape: &[usize]) -> Var {
        self.constant(Tensor::zeros(shape))
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.index >= self.len() {
            return Err(Error::invalid(format!(
                "node {} does not belong to this tape",
                v.index
            )));
        }
        Ok(())
    }

    /// Shared handle to a node's value.
    pub fn value(&self, v: Var) -> Arc<Tensor> {
        assert_eq!(v.tape, self.id, "var from another tape");
        Arc::clone(&self.nodes.borrow()[v.index].value)
    }

    /// Owned copy of a node's value, tagged with its node id.
    pub fn tensor(&self, v: Var) -> Tensor {
        let mut t = (*self.value(v)).clone();
        t.node = Some(v);
        t
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape.clone()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.index].needs_grad
    }

    fn push(&self, value: Tensor, op: Op, parents: &[usize]) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = parents.iter().any(|&p| nodes[p].needs_grad);
        let op = if needs_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
        });
        Var {
            tape: self.id,
            index: nodes.len() - 1,
        }
    }

    /// Applies a primitive by kind.
    pub fn apply(&self, prim: Primitive, inputs: &[Var]) -> Result<Var> {
        if let Some(n) = prim.arity() {
            if inputs.len() != n {
                return Err(Error::invalid(format!(
                    "{prim}: expected {n} inputs, got {}",
                    inputs.len()
                )));
            }
        }
        match prim {
            Primitive::Add => self.add(inputs[0], inputs[1]),
            Primitive::Sub => self.sub(inputs[0], inputs[1]),
            Primitive::Mul => self.mul(inputs[0], inputs[1]),
            Primitive::Scale(s) => self.scale(inputs[0], s),
            Primitive::MatMul => self.matmul(inputs[0], inputs[1]),
            Primitive::Transpose => self.transpose(inputs[0]),
            Primitive::Affine => self.affine(inputs[0], inputs[1], inputs[2]),
            Primitive::Concat => self.concat(inputs),
            Primitive::ConcatRows => self.concat_rows(inputs),
            Primitive::Tanh => self.tanh(inputs[0]),
            Primitive::Sigmoid => self.sigmoid(inputs[0]),
            Primitive::Exp => self.exp(inputs[0]),
            Primitive::Softmax => self.softmax(inputs[0]),
            Primitive::LogSoftmax => self.log_softmax(inputs[0]),
            Primitive::Lookup(ids) => self.lookup(inputs[0], &ids),
            Primitive::Gather(cols) => self.gather(inputs[0], &cols),
            Primitive::Pick(idx) => self.pick(inputs[0], &idx),
            Primitive::Sum => self.sum(inputs[0]),
            Primitive::Mean => self.mean(inputs[0]),
            Primitive::StraightThrough => self.straight_through(inputs[0], inputs[1]),
        }
    }

    /// Parses `name` and applies the resulting primitive.
    pub fn apply_named(&self, name: &str, inputs: &[Var]) -> Result<Var> {
        self.apply(name.parse()?, inputs)
    }

    fn broadcast_mode(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Broadcast> {
        if a.shape == b.shape {
            Ok(Broadcast::None)
        } else if b.len() == 1 {
            Ok(Broadcast::Scalar)
        } else if b.rows() == 1 && b.cols() == a.cols() {
            Ok(Broadcast::Row)
        } else {
            Err(Error::shape(op, &a.shape, &b.shape))
        }
    }

    fn binary(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(usize, usize, Broadcast) -> Op,
    ) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let mode = Self::broadcast_mode(name, &av, &bv)?;
        let cols = av.cols();
        let data = av
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv.data[broadcast_index(mode, i, cols)]))
            .collect();
        let out = Tensor::new(av.shape.clone(), data)?;
        Ok(self.push(out, op(a.index, b.index, mode), &[a.index, b.index]))
    }

    /// Elementwise sum. `b` may also be a `[1, n]` row or a scalar, broadcast
    /// over `a`.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&self, a: Var, s: f64) -> Result<Var> {
        self.check(a)?;
        let av = self.value(a);
        let out = Tensor::new(av.shape.clone(), av.data.iter().map(|x| x * s).collect())?;
        Ok(self.push(out, Op::Scale(a.index, s), &[a.index]))
    }

    fn matrix_dims(op: &'static str, t: &Tensor, other: &Tensor) -> Result<(usize, usize)> {
        if t.shape.len() != 2 {
            return Err(Error::shape(op, &t.shape, &other.shape));
        }
        Ok((t.shape[0], t.shape[1]))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = Self::matrix_dims("matmul", &av, &bv)?;
        let (k2, n) = Self::matrix_dims("matmul", &bv, &av)?;
        if k != k2 {
            return Err(Error::shape("matmul", &av.shape, &bv.shape));
        }
        let mut c = vec![0.0; m * n];
        matmul_acc(&av.data, &bv.data, &mut c, m, k, n);
        let out = Tensor::new(vec![m, n], c)?;
        Ok(self.push(out, Op::MatMul(a.index, b.index), &[a.index, b.index]))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        self.check(a)?;
        let av = self.value(a);
        let (m, n) = Self::matrix_dims("transpose", &av, &av)?;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = av.data[i * n + j];
            }
        }
        let out = Tensor::new(vec![n, m], data)?;
        Ok(self.push(out, Op::Transpose(a.index), &[a.index]))
    }

    /// `x · w + b`, with `b` a `[1, n]` row broadcast over the rows of `x`.
    pub fn affine(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        self.check(b)?;
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (m, k) = Self::matrix_dims("affine", &xv, &wv)?;
        let (k2, n) = Self::matrix_dims("affine", &wv, &xv)?;
        if k != k2 {
            return Err(Error::shape("affine", &xv.shape, &wv.shape));
        }
        if bv.len() != n {
            return Err(Error::shape("affine", &wv.shape, &bv.shape));
        }
        let mut c = Vec::with_capacity(m * n);
        for _ in 0..m {
            c.extend_from_slice(&bv.data);
        }
        matmul_acc(&xv.data, &wv.data, &mut c, m, k, n);
        let out = Tensor::new(vec![m, n], c)?;
        Ok(self.push(
            out,
            Op::Affine(x.index, w.index, b.index),
            &[x.index, w.index, b.index],
        ))
    }

    /// Concatenates along the last axis; all inputs must agree on rows.
    pub fn concat(&self, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::invalid("concat: no inputs"));
        }
        for &v in inputs {
            self.check(v)?;
        }
        let vals: Vec<_> = inputs.iter().map(|&v| self.value(v)).collect();
        let rows = vals[0].rows();
        for v in &vals[1..] {
            if v.rows() != rows {
                return Err(Error::shape("concat", &vals[0].shape, &v.shape));
            }
        }
        let total: usize = vals.iter().map(|v| v.cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &vals {
                data.extend_from_slice(v.row_slice(r));
            }
        }
        let mut shape = vals[0].shape.clone();
        *shape.last_mut().unwrap() = total;
        let out = Tensor::new(shape, data)?;
        let idx: Vec<usize> = inputs.iter().map(|v| v.index).collect();
        Ok(self.push(out, Op::Concat(idx.clone()), &idx))
    }

    /// Stacks inputs along the first axis; all inputs must agree on columns.
    pub fn concat_rows(&self, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::invalid("concat_rows: no inputs"));
        }
        for &v in inputs {
            self.check(v)?;
        }
        let vals: Vec<_> = inputs.iter().map(|&v| self.value(v)).collect();
        let cols = vals[0].cols();
        let mut data = Vec::new();
        for v in &vals {
            if v.cols() != cols {
                return Err(Error::shape("concat_rows", &vals[0].shape, &v.shape));
            }
            data.extend_from_slice(&v.data);
        }
        let rows = data.len() / cols;
        let out = Tensor::new(vec![rows, cols], data)?;
        let idx: Vec<usize> = inputs.iter().map(|v| v.index).collect();
        Ok(self.push(out, Op::ConcatRows(idx.clone()), &idx))
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        self.check(a)?;
        let av = self.value(a);
        let out = Tensor::new(av.shape.clone(), av.data.iter().map(|&x| f(x)).collect())?;
        Ok(self.push(out, op, &[a.index]))
    }

    pub fn tanh(&self, a: Var) -> Result<Var> {
        self.unary(a, f64::tanh, Op::Tanh(a.index))
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        self.unary(a, sigmoid, Op::Sigmoid(a.index))
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        self.unary(a, f64::exp, Op::Exp(a.index))
    }

    /// Row-wise log-softmax with max subtraction.
    pub fn log_softmax(&self, a: Var) -> Result<Var> {
        self.check(a)?;
        let av = self.value(a);
        let out = Tensor::new(av.shape.clone(), log_softmax_rows(&av))?;
        Ok(self.push(out, Op::LogSoftmax(a.index), &[a.index]))
    }

    /// Row-wise softmax, computed as `exp(log_softmax(x))`.
    pub fn softmax(&self, a: Var) -> Result<Var> {
        self.check(a)?;
        let av = self.value(a);
        let data = log_softmax_rows(&av).into_iter().map(f64::exp).collect();
        let out = Tensor::new(av.shape.clone(), data)?;
        Ok(self.push(out, Op::Softmax(a.index), &[a.index]))
    }

    /// Gathers rows `ids` of a 2-D table (embedding lookup).
    pub fn lookup(&self, table: Var, ids: &[usize]) -> Result<Var> {
        self.check(table)?;
        let tv = self.value(table);
        if tv.shape.len() != 2 {
            return Err(Error::shape("lookup", &tv.shape, &[ids.len()]));
        }
        if ids.is_empty() {
            return Err(Error::invalid("lookup: empty id list"));
        }
        let (rows, cols) = (tv.shape[0], tv.shape[1]);
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::invalid(format!(
                    "lookup: id {id} out of range for table {:?}",
                    tv.shape
                )));
            }
            data.extend_from_slice(tv.row_slice(id));
        }
        let out = Tensor::new(vec![ids.len(), cols], data)?;
        Ok(self.push(out, Op::GatherRows(table.index, ids.to_vec()), &[table.index]))
    }

    /// Gathers columns `cols` of every row.
    pub fn gather(&self, a: Var, cols: &[usize]) -> Result<Var> {
        self.check(a)?;
        let av = self.value(a);
        if cols.is_empty() {
            return Err(Error::invalid("gather: empty column list"));
        }
        let c = av.cols();
        if let Some(&bad) = cols.iter().find(|&&j| j >= c) {
            return Err(Error::invalid(format!(
                "gather: column {bad} out of range for {:?}",
                av.shape
            )));
        }
        let mut data = Vec::with_capacity(av.rows() * cols.len());
        for r in 0..av.rows() {
            let row = av.row_slice(r);
            data.extend(cols.iter().map(|&j| row[j]));
        }
        let mut shape = av.shape.clone();
        *shape.last_mut().unwrap() = cols.len();
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::GatherCols(a.index, cols.to_vec()), &[a.index]))
    }

    /// Picks column `idx[r]` of each row `r`, giving a `[rows, 1]` tensor.
    pub fn pick(&self, a: Var, idx: &[usize]) -> Result<Var> {
        self.check(a)?;
        let av = self.value(a);
        if idx.len() != av.rows() {
            return Err(Error::shape("pick", &av.shape, &[idx.len()]));
        }
        let c = av.cols();
        let mut data = Vec::with_capacity(idx.len());
        for (r, &j) in idx.iter().enumerate() {
            if j >= c {
                return Err(Error::invalid(format!(
                    "pick: column {j} out of range for {:?}",
                    av.shape
                )));
            }
            data.push(av.data[r * c + j]);
        }
        let out = Tensor::new(vec![idx.len(), 1], data)?;
        Ok(self.push(out, Op::Pick(a.index, idx.to_vec()), &[a.index]))
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s = self.value(a).data.iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(a.index), &[a.index]))
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        self.check(a)?;
        let av = self.value(a);
        let s = av.data.iter().sum::<f64>() / av.len() as f64;
        Ok(self.push(Tensor::scalar(s), Op::Mean(a.index), &[a.index]))
    }

    /// Forward value of `hard`; gradients flow to both `hard` and `soft`.
    pub fn straight_through(&self, hard: Var, soft: Var) -> Result<Var> {
        self.check(hard)?;
        self.check(soft)?;
        let (hv, sv) = (self.value(hard), self.value(soft));
        if hv.shape != sv.shape {
            return Err(Error::shape("straight_through", &hv.shape, &sv.shape));
        }
        let i = {
            let mut seen = self.soft_seen.borrow_mut();
            seen.push(strip(&sv));
            seen.len() - 1
        };
        if let Some(frozen) = &self.frozen_soft {
            let r = frozen
                .get(i)
                .ok_or_else(|| Error::invalid("straight_through: no frozen soft value for this call"))?;
            let r = self.constant(r.clone());
            return self.add(hard, self.sub(soft, r)?);
        }
        let out = Tensor::new(hv.shape.clone(), hv.data.clone())?;
        Ok(self.push(
            out,
            Op::StraightThrough(hard.index, soft.index),
            &[hard.index, soft.index],
        ))
    }

    /// Sum of a list of scalars (or same-shape tensors).
    pub fn add_all(&self, items: &[Var]) -> Result<Var> {
        let (&first, rest) = items
            .split_first()
            .ok_or_else(|| Error::invalid("add_all: empty list"))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        let nodes = self.nodes.borrow();
        let n = loss.index + 1;
        if nodes[loss.index].value.len() != 1 {
            return Err(Error::invalid(format!(
                "backward: loss must be scalar, got shape {:?}",
                nodes[loss.index].value.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.index] = Some(vec![1.0]);

        for i in (0..n).rev() {
            if !nodes[i].needs_grad {
                continue;
            }
            let op = &nodes[i].op;
            if matches!(op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let out = &nodes[i].value;
            let mut acc = |p: usize, f: &mut dyn FnMut(&mut [f64])| {
                if nodes[p].needs_grad {
                    let buf = grads[p].get_or_insert_with(|| vec![0.0; nodes[p].value.len()]);
                    f(buf);
                }
            };
            match op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b, mode) => {
                    let cols = out.cols();
                    acc(*a, &mut |ga| add_into(ga, &g));
                    acc(*b, &mut |gb| reduce_broadcast(&g, *mode, cols, gb));
                }
                Op::Sub(a, b, mode) => {
                    let cols = out.cols();
                    acc(*a, &mut |ga| add_into(ga, &g));
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    acc(*b, &mut |gb| reduce_broadcast(&neg, *mode, cols, gb));
                }
                Op::Mul(a, b, mode) => {
                    let cols = out.cols();
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    acc(*a, &mut |ga| {
                        for (k, gv) in ga.iter_mut().enumerate() {
                            *gv += g[k] * bv.data[broadcast_index(*mode, k, cols)];
                        }
                    });
                    let prod: Vec<f64> = g.iter().zip(&av.data).map(|(x, y)| x * y).collect();
                    acc(*b, &mut |gb| reduce_broadcast(&prod, *mode, cols, gb));
                }
                Op::Scale(a, s) => {
                    acc(*a, &mut |ga| {
                        for (gv, x) in ga.iter_mut().zip(&g) {
                            *gv += s * x;
                        }
                    });
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    let (m, k, nn) = (av.shape[0], av.shape[1], bv.shape[1]);
                    acc(*a, &mut |ga| matmul_bt_acc(&g, &bv.data, ga, m, k, nn));
                    acc(*b, &mut |gb| matmul_at_acc(&av.data, &g, gb, m, k, nn));
                }
                Op::Transpose(a) => {
                    let (m, nn) = (out.shape[1], out.shape[0]);
                    acc(*a, &mut |ga| {
                        for r in 0..m {
                            for c in 0..nn {
                                ga[r * nn + c] += g[c * m + r];
                            }
                        }
                    });
                }
                Op::Affine(x, w, b) => {
                    let (xv, wv) = (&nodes[*x].value, &nodes[*w].value);
                    let (m, k, nn) = (xv.shape[0], xv.shape[1], wv.shape[1]);
                    acc(*x, &mut |gx| matmul_bt_acc(&g, &wv.data, gx, m, k, nn));
                    acc(*w, &mut |gw| matmul_at_acc(&xv.data, &g, gw, m, k, nn));
                    acc(*b, &mut |gb| reduce_broadcast(&g, Broadcast::Row, nn, gb));
                }
                Op::Concat(inputs) => {
                    let rows = out.rows();
                    let total = out.cols();
                    let mut offset = 0;
                    for &p in inputs {
                        let c = nodes[p].value.cols();
                        acc(p, &mut |gp| {
                            for r in 0..rows {
                                add_into(
                                    &mut gp[r * c..(r + 1) * c],
                                    &g[r * total + offset..r * total + offset + c],
                                );
                            }
                        });
                        offset += c;
                    }
                }
                Op::ConcatRows(inputs) => {
                    let mut offset = 0;
                    for &p in inputs {
                        let len = nodes[p].value.len();
                        acc(p, &mut |gp| add_into(gp, &g[offset..offset + len]));
                        offset += len;
                    }
                }
                Op::Tanh(a) => acc(*a, &mut |ga| {
                    for ((gv, x), y) in ga.iter_mut().zip(&g).zip(&out.data) {
                        *gv += x * (1.0 - y * y);
                    }
                }),
                Op::Sigmoid(a) => acc(*a, &mut |ga| {
                    for ((gv, x), y) in ga.iter_mut().zip(&g).zip(&out.data) {
                        *gv += x * y * (1.0 - y);
                    }
                }),
                Op::Exp(a) => acc(*a, &mut |ga| {
                    for ((gv, x), y) in ga.iter_mut().zip(&g).zip(&out.data) {
                        *gv += x * y;
                    }
                }),
                Op::Softmax(a) => {
                    let c = out.cols();
                    acc(*a, &mut |ga| {
                        for (r, (grow, yrow)) in g.chunks(c).zip(out.data.chunks(c)).enumerate() {
                            let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                            for j in 0..c {
                                ga[r * c + j] += yrow[j] * (grow[j] - dot);
                            }
                        }
                    })
                }
                Op::LogSoftmax(a) => {
                    let c = out.cols();
                    acc(*a, &mut |ga| {
                        for (r, (grow, lrow)) in g.chunks(c).zip(out.data.chunks(c)).enumerate() {
                            let total: f64 = grow.iter().sum();
                            for j in 0..c {
                                ga[r * c + j] += grow[j] - lrow[j].exp() * total;
                            }
                        }
                    })
                }
                Op::GatherRows(t, ids) => {
                    let c = out.cols();
                    acc(*t, &mut |gt| {
                        for (r, &id) in ids.iter().enumerate() {
                            add_into(&mut gt[id * c..(id + 1) * c], &g[r * c..(r + 1) * c]);
                        }
                    })
                }
                Op::GatherCols(a, cols) => {
                    let src_cols = nodes[*a].value.cols();
                    let k = cols.len();
                    acc(*a, &mut |ga| {
                        for r in 0..out.rows() {
                            for (q, &j) in cols.iter().enumerate() {
                                ga[r * src_cols + j] += g[r * k + q];
                            }
                        }
                    })
                }
                Op::Pick(a, idx) => {
                    let c = nodes[*a].value.cols();
                    acc(*a, &mut |ga| {
                        for (r, &j) in idx.iter().enumerate() {
                            ga[r * c + j] += g[r];
                        }
                    })
                }
                Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|v| *v += g[0])),
                Op::Mean(a) => {
                    let len = nodes[*a].value.len() as f64;
                    acc(*a, &mut |ga| ga.iter_mut().for_each(|v| *v += g[0] / len))
                }
                Op::StraightThrough(h, s) => {
                    acc(*h, &mut |gh| add_into(gh, &g));
                    acc(*s, &mut |gs| add_into(gs, &g));
                }
            }
        }

        let shapes = nodes[..n].iter().map(|nd| nd.value.shape.clone()).collect();
        Ok(Gradients {
            tape: self.id,
            grads,
            shapes,
        })
    }
}

fn strip(t: &Tensor) -> Tensor {
    Tensor {
        shape: t.shape.clone(),
        data: t.data.clone(),
        grad: None,
        node: None,
    }
}

/// Result of [`Tape::backward`]: gradient per tape node.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; all zeros when `v` does not
    /// reach the loss.
    pub fn get(&self, v: Var) -> Tensor {
        assert_eq!(v.tape, self.tape, "var from another tape");
        if v.index >= self.shapes.len() {
            // Recorded after the loss, so it cannot influence it.
            return Tensor::zeros(&[1]);
        }
        let shape = self.shapes[v.index].clone();
        match &self.grads[v.index] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    /// Borrowed gradient buffer, `None` when the node received no gradient.
    pub fn raw(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.index).and_then(|g| g.as_deref())
    }
}

/// Compares reverse-mode gradients of `f` at `point` against five-point
/// central finite differences with step `eps`.
///
/// Returns the maximum over all coordinates of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, point: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    grad_check_on(Tape::new, f, point, eps)
}

/// [`grad_check`] against the straight-through surrogate: soft values are
/// frozen at `point`, so the numeric derivative sees the soft path too.
pub fn grad_check_straight_through<F>(f: F, point: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|t| tape.param(t)).collect();
    f(&tape, &vars)?;
    let frozen = tape.soft_values();
    grad_check_on(|| Tape::with_frozen_soft(frozen.clone()), f, point, eps)
}

fn grad_check_on<T, F>(make_tape: T, f: F, point: &[Tensor], eps: f64) -> Result<f64>
where
    T: Fn() -> Tape,
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::invalid(format!("grad_check: eps must be > 0, got {eps}")));
    }
    let eval = |pt: &[Tensor]| -> Result<f64> {
        let tape = make_tape();
        let vars: Vec<Var> = pt.iter().map(|t| tape.param(t)).collect();
        let out = f(&tape, &vars)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(Error::invalid(format!(
                "grad_check: function output must be scalar, got shape {:?}",
                v.shape
            )));
        }
        Ok(v.data[0])
    };

    let tape = make_tape();
    let vars: Vec<Var> = point.iter().map(|t| tape.param(t)).collect();
    let out = f(&tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(Error::invalid(format!(
            "grad_check: function output must be scalar, got shape {:?}",
            tape.shape(out)
        )));
    }
    let grads = tape.backward(out)?;

    let mut work: Vec<Tensor> = point.iter().map(strip).collect();
    let mut worst: f64 = 0.0;
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads.get(v);
        for j in 0..work[i].len() {
            let orig = work[i].data[j];
            let mut at = |h: f64| {
                work[i].data[j] = orig + h;
                eval(&work)
            };
            let (p1, m1, p2, m2) = (at(eps)?, at(-eps)?, at(2.0 * eps)?, at(-2.0 * eps)?);
            work[i].data[j] = orig;
            // Fourth-order central stencil.
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps);
            let a = analytic.data[j];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn tensor_shape_invariant() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn matmul_identity() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let eye = tape.constant(
            Tensor::matrix(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap(),
        );
        let c = tape.matmul(a, eye).unwrap();
        assert_eq!(tape.value(c).data(), &[1., 2., 3., 4., 5., 6.]);
    }

    #[test]
    fn matmul_shape_error_names_primitive_and_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("matmul"), "{msg}");
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn unknown_primitive_rejected() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2]));
        assert!(matches!(
            tape.apply_named("frobnicate", &[a]),
            Err(Error::UnknownPrimitive(_))
        ));
        assert!(tape.apply_named("tanh", &[a]).is_ok());
        assert!(tape.apply_named("add", &[a]).is_err());
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[4]));
        let s = tape.softmax(a).unwrap();
        approx(tape.value(s).data(), &[0.25; 4], 1e-15);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::new();
        let x = tape.param(&Tensor::matrix(2, 2, vec![3., -1., 0.5, 2.]).unwrap());
        let loss = tape.sum(x).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).data(), &[1.0; 4]);
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let tape = Tape::new();
        let x = tape.param(&Tensor::matrix(2, 3, vec![0.3, -1.2, 2.0, 0.0, 4.0, -3.0]).unwrap());
        let s = tape.softmax(x).unwrap();
        let loss = tape.sum(s).unwrap();
        let g = tape.backward(loss).unwrap();
        approx(g.get(x).data(), &[0.0; 6], 1e-15);
    }

    #[test]
    fn unreachable_param_gets_zero() {
        let tape = Tape::new();
        let x = tape.param(&Tensor::row(vec![1.0, 2.0]));
        let y = tape.param(&Tensor::row(vec![5.0]));
        let loss = tape.sum(x).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(y).data(), &[0.0]);
        assert!(g.raw(y).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign_loss() {
        let tape = Tape::new();
        let x = tape.param(&Tensor::row(vec![1.0, 2.0]));
        assert!(tape.backward(x).is_err());
        let other = Tape::new();
        let y = other.param(&Tensor::scalar(1.0));
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn polynomial_grad_check() {
        let err = grad_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                t.sum(sq)
            },
            &[Tensor::row(vec![1.0, 2.0])],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");

        let tape = Tape::new();
        let x = tape.param(&Tensor::row(vec![1.0, 2.0]));
        let loss = tape.mul(x, x).and_then(|s| tape.sum(s)).unwrap();
        approx(tape.backward(loss).unwrap().get(x).data(), &[2.0, 4.0], 1e-15);
    }

    #[test]
    fn grad_check_rejects_non_scalar() {
        let r = grad_check(|t, v| t.tanh(v[0]), &[Tensor::row(vec![1.0, 2.0])], 1e-5);
        assert!(r.is_err());
        assert!(grad_check(|t, v| t.sum(v[0]), &[Tensor::scalar(1.0)], 0.0).is_err());
    }

    #[test]
    fn straight_through_forward_is_hard() {
        let tape = Tape::new();
        let hard = tape.param(&Tensor::row(vec![1.0, 0.0]));
        let soft = tape.param(&Tensor::row(vec![0.3, 0.7]));
        let st = tape.straight_through(hard, soft).unwrap();
        assert_eq!(tape.value(st).data(), &[1.0, 0.0]);
        let w = tape.constant(Tensor::row(vec![2.0, -1.0]));
        let loss = tape.mul(st, w).and_then(|m| tape.sum(m)).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(soft).data(), &[2.0, -1.0]);
        assert_eq!(g.get(hard).data(), &[2.0, -1.0]);
    }

    #[test]
    fn broadcast_add_row_and_scalar() {
        let tape = Tape::new();
        let m = tape.param(&Tensor::matrix(2, 2, vec![1., 2., 3., 4.]).unwrap());
        let r = tape.param(&Tensor::row(vec![10., 20.]));
        let s = tape.param(&Tensor::scalar(0.5));
        let y = tape.add(m, r).unwrap();
        assert_eq!(tape.value(y).data(), &[11., 22., 13., 24.]);
        let z = tape.mul(y, s).unwrap();
        let loss = tape.sum(z).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(r).data(), &[1.0, 1.0]);
        assert_eq!(g.get(s).data(), &[70.0]);
        assert!(tape.add(r, m).is_err());
    }

    #[test]
    fn tape_replay_is_bit_identical() {
        let run = || {
            let tape = Tape::new();
            let x = tape.param(&Tensor::row(vec![0.1, -0.7, 1.3]));
            let y = tape.log_softmax(x).and_then(|l| tape.tanh(l)).unwrap();
            let loss = tape.sum(y).unwrap();
            let g = tape.backward(loss).unwrap();
            (tape.item(loss).to_bits(), g.get(x).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        };
        assert_eq!(run(), run());
    }
}

#[cfg(test)]
mod props {
    use proptest::prelude::*;

    use super::*;

    fn matrix() -> impl Strategy<Value = Tensor> {
        (1usize..5, 1usize..6).prop_flat_map(|(r, c)| {
            prop::collection::vec(-30.0f64..30.0, r * c).prop_map(move |d| Tensor::new(vec![r, c], d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(x in matrix()) {
            let tape = Tape::new();
            let s = tape.value(tape.softmax(tape.constant(x.clone())).unwrap());
            let ls = tape.value(tape.log_softmax(tape.constant(x.clone())).unwrap());
            for r in 0..x.rows() {
                let row = s.row_slice(r);
                prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                let lse: f64 = ls.row_slice(r).iter().map(|l| l.exp()).sum();
                prop_assert!((lse - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn transpose_of_product(a in matrix(), seed in any::<u64>()) {
            let mut rng = crate::sampling::Rng::seed_from(seed);
            let k = 3;
            let b = Tensor::new(vec![a.cols(), k], (0..a.cols() * k).map(|_| rng.uniform_in(-1.0, 1.0)).collect()).unwrap();
            let tape = Tape::new();
            let (va, vb) = (tape.constant(a), tape.constant(b));
            let left = tape.value(tape.transpose(tape.matmul(va, vb).unwrap()).unwrap());
            let right = tape.value(tape.matmul(tape.transpose(vb).unwrap(), tape.transpose(va).unwrap()).unwrap());
            prop_assert_eq!(left.shape(), right.shape());
            for (x, y) in left.data().iter().zip(right.data()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn row_broadcast_matches_explicit_add(a in matrix(), shift in -5.0f64..5.0) {
            let row = Tensor::new(vec![1, a.cols()], (0..a.cols()).map(|j| shift * j as f64).collect()).unwrap();
            let tape = Tape::new();
            let out = tape.value(tape.add(tape.constant(a.clone()), tape.constant(row.clone())).unwrap());
            for r in 0..a.rows() {
                for c in 0..a.cols() {
                    prop_assert_eq!(out.row_slice(r)[c], a.row_slice(r)[c] + row.data()[c]);
                }
            }
        }
    }
}
