//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Calling
//! [`Tape::backward`] on a scalar walks the record in reverse and returns the
//! gradient of that scalar with respect to every node that requires one.
//!
//! Broadcasting is limited to scalar-with-tensor; anything else needs an
//! explicit [`Var::expand_rows`], [`Var::select_rows`] or [`Var::reshape`].
//! Every forward op checks its output for NaN/Inf and fails immediately.
//!
//! ```
//! use rws_core::diff::Tape;
//! use rws_core::Tensor;
//!
//! let tape = Tape::new();
//! let x = tape.leaf(&Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
//! let loss = x.mul(x).unwrap().sum().unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(x), vec![2.0, 4.0, 6.0]);
//! ```

use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::{Cell, RefCell};

use crate::math;
use crate::tensor::{numel, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    Shift(usize),
    MatMul(usize, usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    SumAll(usize),
    SumLast(usize),
    Softmax(usize),
    LogSoftmax(usize),
    LogSumExp(usize),
    Gather(usize, Vec<usize>),
    Concat(Vec<usize>),
    ConcatRows(Vec<usize>),
    SelectRows(usize, Vec<usize>),
    SegmentSum(usize, Vec<usize>),
    Reshape(usize),
    ExpandRows(usize),
}

struct Node {
    shape: Vec<usize>,
    value: Rc<Vec<f64>>,
    op: Op,
    requires_grad: bool,
}

/// The computation record. Confined to one thread; values can leave it as
/// [`Tensor`]s.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl core::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    lens: Vec<usize>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&[f64]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    /// Gradient with respect to `var`, or zeros when no path reached it.
    pub fn wrt(&self, var: Var<'_>) -> Vec<f64> {
        match self.get(var) {
            Some(g) => g.to_vec(),
            None => vec![0.0; self.lens[var.id]],
        }
    }
}

/// Rows and columns when the last axis is treated as the column axis.
fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = shape.last().copied().unwrap_or(1);
    let n = numel(shape);
    if cols == 0 {
        (0, 0)
    } else {
        (n / cols, cols)
    }
}

fn check_finite(op: &'static str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
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
        value: Vec<f64>,
        op: Op,
        requires_grad: bool,
    ) -> Result<Var<'_>> {
        debug_assert_eq!(numel(&shape), value.len());
        check_finite(op_name, &value)?;
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            shape,
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Ok(Var { tape: self, id })
    }

    /// A leaf that receives a gradient.
    pub fn leaf(&self, t: &Tensor) -> Result<Var<'_>> {
        self.push("leaf", t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, t: &Tensor) -> Result<Var<'_>> {
        self.push("constant", t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_from(&self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var<'_>> {
        if numel(&shape) != data.len() {
            return Err(Error::ShapeMismatch {
                op: "constant",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        self.push("constant", shape, data, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Result<Var<'_>> {
        self.push("constant", Vec::new(), vec![value], Op::Leaf, false)
    }

    fn node_parts(&self, id: usize) -> (Vec<usize>, Rc<Vec<f64>>, bool) {
        let nodes = self.nodes.borrow();
        let n = &nodes[id];
        (n.shape.clone(), n.value.clone(), n.requires_grad)
    }

    /// Backpropagates from a scalar `loss`. The record can be consumed once.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if self.consumed.get() {
            return Err(Error::RecordConsumed);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::NotScalar(root.shape.clone()));
        }
        self.consumed.set(true);

        let lens: Vec<usize> = nodes.iter().map(|n| n.value.len()).collect();
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![1.0]);

        for i in (0..=loss.id).rev() {
            let (lo, hi) = grads.split_at_mut(i);
            let g = match hi[0].as_ref() {
                Some(g) => g,
                None => continue,
            };
            let node = &nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    if let Some(ga) = slot(lo, &nodes, &lens, *a) {
                        reduce_broadcast(ga, g, 1.0);
                    }
                    if let Some(gb) = slot(lo, &nodes, &lens, *b) {
                        reduce_broadcast(gb, g, sign);
                    }
                }
                Op::Mul(a, b) => {
                    let va = &nodes[*a].value;
                    let vb = &nodes[*b].value;
                    if let Some(ga) = slot(lo, &nodes, &lens, *a) {
                        accumulate_product(ga, g, vb);
                    }
                    if let Some(gb) = slot(lo, &nodes, &lens, *b) {
                        accumulate_product(gb, g, va);
                    }
                }
                Op::Div(a, b) => {
                    let va = nodes[*a].value.clone();
                    let vb = nodes[*b].value.clone();
                    if let Some(ga) = slot(lo, &nodes, &lens, *a) {
                        let inv: Vec<f64> = vb.iter().map(|x| 1.0 / x).collect();
                        accumulate_product(ga, g, &inv);
                    }
                    if let Some(gb) = slot(lo, &nodes, &lens, *b) {
                        // d(a/b)/db = -a/b^2, with either side possibly broadcast.
                        let n = g.len();
                        let at = |v: &[f64], k: usize| if v.len() == 1 { v[0] } else { v[k] };
                        let local: Vec<f64> =
                            (0..n).map(|k| -g[k] * at(&va, k) / (at(&vb, k) * at(&vb, k))).collect();
                        reduce_broadcast(gb, &local, 1.0);
                    }
                }
                Op::Scale(a, s) => {
                    if let Some(ga) = slot(lo, &nodes, &lens, *a) {
                        for (d, x) in ga.iter_mut().zip(g) {
                            *d += s * x;
                        }
                    }
                }
                Op::Shift(a) | Op::Reshape(a) => {
                    if let Some(ga) = slot(lo, &nodes, &lens, *a) {
                        add_into(ga, g);
                    }
                }
                Op::MatMul(a, b) => {
                    let (n, m) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                    let p = nodes[*b].shape[1];
                    let va = nodes[*a].value.clone();
                    let vb = nodes[*b].value.clone();
                    if let Some(ga) = slot(lo, &nodes, &lens, *a) {
                        for r in 0..n {
                            let grow = &g[r * p..(r + 1) * p];
                            for k in 0..m {
                                let brow = &vb[k * p..(k + 1) * p];
                                let dot: f64 = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                                ga[r * m + k] += dot;
                            }
                        }
                    }
                    if let Some(gb) = slot(lo, &nodes, &lens, *b) {
                        for r in 0..n {
                            let grow = &g[r * p..(r + 1) * p];
                            for k in 0..m {
                                let a_rk = va[r * m + k];
                                if a_rk == 0.0 {
                                    continue;
                                }
                                let dst = &mut gb[k * p..(k + 1) * p];
                                for (d, x) in dst.iter_mut().zip(grow) {
                                    *d += a_rk * x;
                                }
                            }
                        }
                    }
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    if let Some(ga) = slot(lo, &nodes, &lens, *a) {
                        for k in 0..g.len() {
                            ga[k] += g[k] * (1.0 - y[k] * y[k]);
                        }
                    }
                }
                Op::Exp(a) => {
                    let y = &node.value;
                    if let Some(ga) = slot(lo, &nodes, &lens, *a) {
                        accumulate_product(ga, g, y);
                    }
                }
                Op::Log(a) => {
                    let x = nodes[*a].value.clone();
                    if let Some(ga) = slot(lo, &nodes, &lens, *a) {
                        for k in 0..g.len() {
                            ga[k] += g[k] / x[k];
                        }
                    }
                }
                Op::SumAll(a) => {
                    if let Some(ga) = slot(lo, &nodes, &lens, *a) {
                        for d in ga.iter_mut() {
                            *d += g[0];
                        }
                    }
                }
                Op::SumLast(a) => {
                    let (_, cols) = rows_cols(&nodes[*a].shape);
                    if let Some(ga) = slot(lo, &nodes, &lens, *a) {
                        for (r, row) in ga.chunks_mut(cols).enumerate() {
                            for d in row {
                                *d += g[r];
                            }
                        }
                    }
                }
                Op::Softmax(a) => {
                    let (_, cols) = rows_cols(&node.shape);
                    let y = node.value.clone();
                    if let Some(ga) = slot(lo, &nodes, &lens, *a) {
                        for r in 0..y.len() / cols {
                            let s = r * cols..(r + 1) * cols;
                            let dot: f64 = g[s.clone()].iter().zip(&y[s.clone()]).map(|(a, b)| a * b).sum();
                            for k in s {
                                ga[k] += y[k] * (g[k] - dot);
                            }
                        }
                    }
                }
                Op::LogSoftmax(a) => {
                    let (_, cols) = rows_cols(&node.shape);
                    let y = node.value.clone();
                    if let Some(ga) = slot(lo, &nodes, &lens, *a) {
                        for r in 0..y.len() / cols {
                            let s = r * cols..(r + 1) * cols;
                            let total: f64 = g[s.clone()].iter().sum();
                            for k in s {
                                ga[k] += g[k] - math::exp(y[k]) * total;
                            }
                        }
                    }
                }
                Op::LogSumExp(a) => {
                    let (_, cols) = rows_cols(&nodes[*a].shape);
                    let x = nodes[*a].value.clone();
                    let out = node.value.clone();
                    if let Some(ga) = slot(lo, &nodes, &lens, *a) {
                        for (r, &o) in out.iter().enumerate() {
                            for k in r * cols..(r + 1) * cols {
                                ga[k] += g[r] * math::exp(x[k] - o);
                            }
                        }
                    }
                }
                Op::Gather(a, idx) => {
                    let (rows, cols) = rows_cols(&nodes[*a].shape);
                    if let Some(ga) = slot(lo, &nodes, &lens, *a) {
                        let per_row = idx.len() / rows.max(1);
                        for r in 0..rows {
                            for j in 0..per_row {
                                ga[r * cols + idx[r * per_row + j]] += g[r * per_row + j];
                            }
                        }
                    }
                }
                Op::Concat(parts) => {
                    let (rows, out_cols) = rows_cols(&node.shape);
                    let mut offset = 0;
                    for &p in parts {
                        let (_, pc) = rows_cols(&nodes[p].shape);
                        if let Some(gp) = slot(lo, &nodes, &lens, p) {
                            for r in 0..rows {
                                add_into(
                                    &mut gp[r * pc..(r + 1) * pc],
                                    &g[r * out_cols + offset..r * out_cols + offset + pc],
                                );
                            }
                        }
                        offset += pc;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = lens[p];
                        if let Some(gp) = slot(lo, &nodes, &lens, p) {
                            add_into(gp, &g[offset..offset + len]);
                        }
                        offset += len;
                    }
                }
                Op::SelectRows(a, rows) => {
                    let width = lens[*a] / nodes[*a].shape[0].max(1);
                    if let Some(ga) = slot(lo, &nodes, &lens, *a) {
                        for (j, &r) in rows.iter().enumerate() {
                            add_into(&mut ga[r * width..(r + 1) * width], &g[j * width..(j + 1) * width]);
                        }
                    }
                }
                Op::SegmentSum(a, seg) => {
                    if let Some(ga) = slot(lo, &nodes, &lens, *a) {
                        for (k, &s) in seg.iter().enumerate() {
                            ga[k] += g[s];
                        }
                    }
                }
                Op::ExpandRows(a) => {
                    let width = lens[*a];
                    if let Some(ga) = slot(lo, &nodes, &lens, *a) {
                        for row in g.chunks(width) {
                            add_into(ga, row);
                        }
                    }
                }
            }
        }
        Ok(Gradients { grads, lens })
    }
}

/// Gradient buffer of input `j`, if it participates in differentiation.
fn slot<'a>(
    lo: &'a mut [Option<Vec<f64>>],
    nodes: &[Node],
    lens: &[usize],
    j: usize,
) -> Option<&'a mut Vec<f64>> {
    if !nodes[j].requires_grad {
        return None;
    }
    Some(lo[j].get_or_insert_with(|| vec![0.0; lens[j]]))
}

/// `dst += sign * src`, summing `src` down when `dst` is a broadcast scalar.
fn reduce_broadcast(dst: &mut [f64], src: &[f64], sign: f64) {
    if dst.len() == src.len() {
        for (d, s) in dst.iter_mut().zip(src) {
            *d += sign * s;
        }
    } else {
        dst[0] += sign * src.iter().sum::<f64>();
    }
}

/// `dst += g * other` elementwise, handling scalar broadcast on either side.
fn accumulate_product(dst: &mut [f64], g: &[f64], other: &[f64]) {
    let at = |k: usize| if other.len() == 1 { other[0] } else { other[k] };
    if dst.len() == g.len() {
        for k in 0..g.len() {
            dst[k] += g[k] * at(k);
        }
    } else {
        dst[0] += (0..g.len()).map(|k| g[k] * at(k)).sum::<f64>();
    }
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn value(&self) -> Rc<Vec<f64>> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    /// First element; the value of a scalar.
    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn to_tensor(&self) -> Tensor {
        let (shape, value, _) = self.tape.node_parts(self.id);
        Tensor::new(shape, value.as_ref().clone()).expect("node shape matches value")
    }

    /// Same value, cut off from differentiation.
    pub fn detach(self) -> Result<Var<'t>> {
        let (shape, value, _) = self.tape.node_parts(self.id);
        self.tape.push("detach", shape, value.as_ref().clone(), Op::Leaf, false)
    }

    fn unary(
        self,
        name: &'static str,
        f: impl Fn(f64) -> f64,
        op: impl FnOnce(usize) -> Op,
    ) -> Result<Var<'t>> {
        let (shape, v, rg) = self.tape.node_parts(self.id);
        let out = v.iter().map(|&x| f(x)).collect();
        self.tape.push(name, shape, out, op(self.id), rg)
    }

    fn binary(self, other: Var<'t>, kind: Binary) -> Result<Var<'t>> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        let (sa, va, ra) = self.tape.node_parts(self.id);
        let (sb, vb, rb) = self.tape.node_parts(other.id);
        let shape = if sa == sb {
            sa
        } else if vb.len() == 1 {
            sa
        } else if va.len() == 1 {
            sb
        } else {
            return Err(Error::ShapeMismatch { op: name, lhs: sa, rhs: sb });
        };
        let f = match kind {
            Binary::Add => |x: f64, y: f64| x + y,
            Binary::Sub => |x: f64, y: f64| x - y,
            Binary::Mul => |x: f64, y: f64| x * y,
            Binary::Div => |x: f64, y: f64| x / y,
        };
        let out: Vec<f64> = if va.len() == vb.len() {
            va.iter().zip(vb.iter()).map(|(&x, &y)| f(x, y)).collect()
        } else if vb.len() == 1 {
            va.iter().map(|&x| f(x, vb[0])).collect()
        } else {
            vb.iter().map(|&y| f(va[0], y)).collect()
        };
        let op = match kind {
            Binary::Add => Op::Add(self.id, other.id),
            Binary::Sub => Op::Sub(self.id, other.id),
            Binary::Mul => Op::Mul(self.id, other.id),
            Binary::Div => Op::Div(self.id, other.id),
        };
        self.tape.push(name, shape, out, op, ra || rb)
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Sub)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Mul)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Div)
    }

    /// Multiplication by a constant.
    pub fn scale(self, s: f64) -> Result<Var<'t>> {
        self.unary("scale", |x| x * s, |a| Op::Scale(a, s))
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.scale(-1.0)
    }

    /// Addition of a constant.
    pub fn shift(self, c: f64) -> Result<Var<'t>> {
        self.unary("shift", |x| x + c, Op::Shift)
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.mul(self)
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        self.unary("tanh", math::tanh, Op::Tanh)
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary("exp", math::exp, Op::Exp)
    }

    pub fn log(self) -> Result<Var<'t>> {
        self.unary("log", math::ln, Op::Log)
    }

    /// `[n, m] x [m, p] -> [n, p]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (sa, va, ra) = self.tape.node_parts(self.id);
        let (sb, vb, rb) = self.tape.node_parts(other.id);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let (n, m, p) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; n * p];
        for r in 0..n {
            let orow = &mut out[r * p..(r + 1) * p];
            for k in 0..m {
                let a = va[r * m + k];
                if a == 0.0 {
                    continue;
                }
                for (o, b) in orow.iter_mut().zip(&vb[k * p..(k + 1) * p]) {
                    *o += a * b;
                }
            }
        }
        self.tape
            .push("matmul", vec![n, p], out, Op::MatMul(self.id, other.id), ra || rb)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(self) -> Result<Var<'t>> {
        let (_, v, rg) = self.tape.node_parts(self.id);
        let s = v.iter().sum();
        self.tape.push("sum", Vec::new(), vec![s], Op::SumAll(self.id), rg)
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let n = self.numel();
        if n == 0 {
            return Err(Error::invalid("mean of empty tensor"));
        }
        self.sum()?.scale(1.0 / n as f64)
    }

    /// Sum over the last axis: `[r, c] -> [r]`, `[c] -> []`.
    pub fn sum_last(self) -> Result<Var<'t>> {
        let (shape, v, rg) = self.tape.node_parts(self.id);
        let (_, cols) = rows_cols(&shape);
        let out: Vec<f64> = v.chunks(cols.max(1)).map(|c| c.iter().sum()).collect();
        let out_shape = shape[..shape.len().saturating_sub(1)].to_vec();
        self.tape.push("sum_last", out_shape, out, Op::SumLast(self.id), rg)
    }

    pub fn mean_last(self) -> Result<Var<'t>> {
        let cols = self.shape().last().copied().unwrap_or(1);
        self.sum_last()?.scale(1.0 / cols as f64)
    }

    pub fn softmax(self) -> Result<Var<'t>> {
        let (shape, v, rg) = self.tape.node_parts(self.id);
        let (_, cols) = rows_cols(&shape);
        let mut out = Vec::with_capacity(v.len());
        for row in v.chunks(cols.max(1)) {
            out.extend(math::softmax(row));
        }
        self.tape.push("softmax", shape, out, Op::Softmax(self.id), rg)
    }

    pub fn log_softmax(self) -> Result<Var<'t>> {
        let (shape, v, rg) = self.tape.node_parts(self.id);
        let (_, cols) = rows_cols(&shape);
        let mut out = Vec::with_capacity(v.len());
        for row in v.chunks(cols.max(1)) {
            out.extend(math::log_softmax(row));
        }
        self.tape.push("log_softmax", shape, out, Op::LogSoftmax(self.id), rg)
    }

    /// Log-sum-exp over the last axis: `[r, c] -> [r]`.
    pub fn log_sum_exp(self) -> Result<Var<'t>> {
        let (shape, v, rg) = self.tape.node_parts(self.id);
        let (_, cols) = rows_cols(&shape);
        let out: Vec<f64> = v.chunks(cols.max(1)).map(math::log_sum_exp).collect();
        let out_shape = shape[..shape.len().saturating_sub(1)].to_vec();
        self.tape.push("log_sum_exp", out_shape, out, Op::LogSumExp(self.id), rg)
    }

    /// Per-row gather along the last axis. `indices` holds `m` entries per
    /// row; the result has shape `[rows, m]` (or `[m]` for a vector input).
    pub fn gather(self, indices: &[usize]) -> Result<Var<'t>> {
        let (shape, v, rg) = self.tape.node_parts(self.id);
        let (rows, cols) = rows_cols(&shape);
        if rows == 0 || indices.len() % rows != 0 {
            return Err(Error::ShapeMismatch {
                op: "gather",
                lhs: shape,
                rhs: vec![indices.len()],
            });
        }
        let per_row = indices.len() / rows;
        let mut out = Vec::with_capacity(indices.len());
        for r in 0..rows {
            for &i in &indices[r * per_row..(r + 1) * per_row] {
                if i >= cols {
                    return Err(Error::IndexOutOfRange { index: i, len: cols });
                }
                out.push(v[r * cols + i]);
            }
        }
        let out_shape = if shape.len() <= 1 {
            vec![per_row]
        } else {
            let mut s = shape[..shape.len() - 1].to_vec();
            s.push(per_row);
            s
        };
        self.tape
            .push("gather", out_shape, out, Op::Gather(self.id, indices.to_vec()), rg)
    }

    /// Concatenation along the last axis; all parts share the leading shape.
    pub fn concat(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        let tape = first.tape;
        let lead = {
            let s = first.shape();
            s[..s.len().saturating_sub(1)].to_vec()
        };
        let rows = numel(&lead);
        let mut pieces = Vec::with_capacity(parts.len());
        let mut total_cols = 0;
        let mut rg = false;
        for p in parts {
            let (s, v, r) = tape.node_parts(p.id);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape(),
                    rhs: s,
                });
            }
            total_cols += s[lead.len()];
            rg |= r;
            pieces.push((s[lead.len()], v));
        }
        let mut out = Vec::with_capacity(rows * total_cols);
        for r in 0..rows {
            for (c, v) in &pieces {
                out.extend_from_slice(&v[r * c..(r + 1) * c]);
            }
        }
        let mut shape = lead;
        shape.push(total_cols);
        tape.push(
            "concat",
            shape,
            out,
            Op::Concat(parts.iter().map(|p| p.id).collect()),
            rg,
        )
    }

    /// Concatenation along the first axis of vectors, or of 2-D parts with
    /// equal widths.
    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat_rows of nothing"))?;
        let tape = first.tape;
        let fs = first.shape();
        if fs.is_empty() || fs.len() > 2 {
            return Err(Error::ShapeMismatch { op: "concat_rows", lhs: fs, rhs: vec![] });
        }
        let tail = fs[1..].to_vec();
        let mut out = Vec::new();
        let mut rows = 0;
        let mut rg = false;
        for p in parts {
            let (s, v, r) = tape.node_parts(p.id);
            if s.len() != fs.len() || s[1..] != tail[..] {
                return Err(Error::ShapeMismatch { op: "concat_rows", lhs: fs, rhs: s });
            }
            rows += s[0];
            rg |= r;
            out.extend_from_slice(&v);
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        tape.push(
            "concat_rows",
            shape,
            out,
            Op::ConcatRows(parts.iter().map(|p| p.id).collect()),
            rg,
        )
    }

    /// Selects (and possibly repeats) entries of the first axis.
    pub fn select_rows(self, rows: &[usize]) -> Result<Var<'t>> {
        let (shape, v, rg) = self.tape.node_parts(self.id);
        let n = *shape.first().ok_or_else(|| Error::invalid("select_rows on a scalar"))?;
        let width = if n == 0 { 0 } else { v.len() / n };
        let mut out = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            if r >= n {
                return Err(Error::IndexOutOfRange { index: r, len: n });
            }
            out.extend_from_slice(&v[r * width..(r + 1) * width]);
        }
        let mut out_shape = shape.clone();
        out_shape[0] = rows.len();
        self.tape.push(
            "select_rows",
            out_shape,
            out,
            Op::SelectRows(self.id, rows.to_vec()),
            rg,
        )
    }

    /// `out[s] = sum of self[k] with segments[k] == s`, for a vector input.
    pub fn segment_sum(self, segments: &[usize], n_out: usize) -> Result<Var<'t>> {
        let (shape, v, rg) = self.tape.node_parts(self.id);
        if v.len() != segments.len() {
            return Err(Error::ShapeMismatch {
                op: "segment_sum",
                lhs: shape,
                rhs: vec![segments.len()],
            });
        }
        let mut out = vec![0.0; n_out];
        for (x, &s) in v.iter().zip(segments) {
            if s >= n_out {
                return Err(Error::IndexOutOfRange { index: s, len: n_out });
            }
            out[s] += x;
        }
        self.tape.push(
            "segment_sum",
            vec![n_out],
            out,
            Op::SegmentSum(self.id, segments.to_vec()),
            rg,
        )
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Var<'t>> {
        let (old, v, rg) = self.tape.node_parts(self.id);
        if numel(&shape) != v.len() {
            return Err(Error::ShapeMismatch { op: "reshape", lhs: old, rhs: shape });
        }
        self.tape
            .push("reshape", shape, v.as_ref().clone(), Op::Reshape(self.id), rg)
    }

    /// Repeats a vector (or single-row matrix) `n` times: `[c] -> [n, c]`.
    pub fn expand_rows(self, n: usize) -> Result<Var<'t>> {
        let (shape, v, rg) = self.tape.node_parts(self.id);
        let ok = shape.len() == 1 || (shape.len() == 2 && shape[0] == 1);
        if !ok {
            return Err(Error::ShapeMismatch { op: "expand_rows", lhs: shape, rhs: vec![n] });
        }
        let c = v.len();
        let mut out = Vec::with_capacity(n * c);
        for _ in 0..n {
            out.extend_from_slice(&v);
        }
        self.tape
            .push("expand_rows", vec![n, c], out, Op::ExpandRows(self.id), rg)
    }
}

/// Compares the tape gradient of `f` at `params` against central differences.
///
/// `f` builds a scalar from a parameter node. Returns the maximum over
/// coordinates of `|analytic - numeric| / (|numeric| + 1e-8)`.
pub fn finite_difference_check<F>(mut f: F, params: &Tensor, step: f64) -> Result<f64>
where
    F: for<'t> FnMut(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let analytic = {
        let tape = Tape::new();
        let p = tape.leaf(params)?;
        let y = f(&tape, p)?;
        tape.backward(y)?.wrt(p)
    };
    let mut eval = |t: &Tensor| -> Result<f64> {
        let tape = Tape::new();
        let p = tape.constant(t)?;
        let y = f(&tape, p)?.item();
        if !y.is_finite() {
            return Err(Error::NonFinite { op: "finite_difference_check" });
        }
        Ok(y)
    };
    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for i in 0..params.len() {
        let base = params.data()[i];
        probe.data_mut()[i] = base + step;
        let up = eval(&probe)?;
        probe.data_mut()[i] = base - step;
        let down = eval(&probe)?;
        probe.data_mut()[i] = base;
        let numeric = (up - down) / (2.0 * step);
        let err = (analytic[i] - numeric).abs() / (numeric.abs() + 1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn tanh_at_origin_is_zero() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(0.0)).unwrap();
        assert_eq!(x.tanh().unwrap().item(), 0.0);
    }

    #[test]
    fn log_sum_exp_of_zeros() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::vector(vec![0.0, 0.0])).unwrap();
        let y = x.log_sum_exp().unwrap();
        assert!((y.item() - 0.693_147_180_559_945_3).abs() < 1e-12);
    }

    #[test]
    fn softmax_of_equal_entries_is_uniform() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::vector(vec![2.5, 2.5, 2.5])).unwrap();
        for p in x.softmax().unwrap().value().iter() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let tape = Tape::new();
        let x = tape.leaf(&t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0])).unwrap();
        let g = tape.backward(x.sum().unwrap()).unwrap();
        assert_eq!(g.wrt(x), vec![1.0; 6]);
    }

    #[test]
    fn log_sum_exp_gradient_is_softmax() {
        let tape = Tape::new();
        let data = [0.3, -1.2, 2.0, 0.7];
        let x = tape.leaf(&Tensor::vector(data.to_vec())).unwrap();
        let g = tape.backward(x.log_sum_exp().unwrap()).unwrap();
        let expected = math::softmax(&data);
        for (a, b) in g.wrt(x).iter().zip(&expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn loss_gradient_wrt_itself_is_one() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::vector(vec![1.0, 2.0])).unwrap();
        let loss = x.square().unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(loss).unwrap(), &[1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_reuse() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::vector(vec![1.0, 2.0])).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::NotScalar(_))));
        let s = x.sum().unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.backward(s).err(), Some(Error::RecordConsumed));
    }

    #[test]
    fn non_finite_results_fail_immediately() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::vector(vec![0.0, 1.0])).unwrap();
        assert_eq!(x.log().err(), Some(Error::NonFinite { op: "log" }));
        let big = tape.scalar(1000.0).unwrap();
        assert!(big.exp().is_err());
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let tape = Tape::new();
        let a = tape.leaf(&Tensor::vector(vec![1.0, 2.0])).unwrap();
        let b = tape.leaf(&Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
        assert!(matches!(a.add(b), Err(Error::ShapeMismatch { op: "add", .. })));
        assert!(matches!(a.matmul(b), Err(Error::ShapeMismatch { op: "matmul", .. })));
    }

    #[test]
    fn scalar_broadcast_accumulates_gradient() {
        let tape = Tape::new();
        let s = tape.leaf(&Tensor::scalar(2.0)).unwrap();
        let x = tape.leaf(&Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
        let y = x.mul(s).unwrap().sum().unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(s), vec![6.0]);
        assert_eq!(g.wrt(x), vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn multiple_consumers_accumulate() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(3.0)).unwrap();
        // y = x*x + x  -> dy/dx = 2x + 1
        let y = x.mul(x).unwrap().add(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x), vec![7.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(3.0)).unwrap();
        let y = x.detach().unwrap().mul(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x), vec![3.0]);
    }

    #[test]
    fn square_finite_difference() {
        let err = finite_difference_check(
            |_, p| p.square()?.sum(),
            &Tensor::scalar(3.0),
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn gather_select_and_segment_shapes() {
        let tape = Tape::new();
        let x = tape.leaf(&t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        let g = x.gather(&[2, 0, 1, 1]).unwrap();
        assert_eq!(g.shape(), vec![2, 2]);
        assert_eq!(*g.value(), vec![3.0, 1.0, 5.0, 5.0]);
        let s = x.select_rows(&[1, 1, 0]).unwrap();
        assert_eq!(s.shape(), vec![3, 3]);
        assert_eq!(s.value()[..3], [4.0, 5.0, 6.0]);
        let v = g.reshape(vec![4]).unwrap().segment_sum(&[0, 1, 1, 0], 2).unwrap();
        assert_eq!(*v.value(), vec![8.0, 6.0]);
        let loss = v.sum().unwrap().add(s.sum().unwrap()).unwrap();
        let grads = tape.backward(loss).unwrap();
        // gather hits: (0,2),(0,0),(1,1)x2 ; select hits row1 twice, row0 once.
        assert_eq!(grads.wrt(x), vec![2.0, 1.0, 2.0, 2.0, 4.0, 2.0]);
    }

    #[test]
    fn concat_and_expand() {
        let tape = Tape::new();
        let a = tape.leaf(&t(&[2, 1], &[1.0, 2.0])).unwrap();
        let b = tape.leaf(&t(&[2, 2], &[3.0, 4.0, 5.0, 6.0])).unwrap();
        let c = Var::concat(&[a, b]).unwrap();
        assert_eq!(*c.value(), vec![1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let r = tape.leaf(&Tensor::vector(vec![1.0, -1.0, 0.5])).unwrap();
        let e = r.expand_rows(2).unwrap();
        let stacked = Var::concat_rows(&[c, e]).unwrap();
        assert_eq!(stacked.shape(), vec![4, 3]);
        let w = tape
            .constant(&t(&[4, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]))
            .unwrap();
        let loss = stacked.mul(w).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(a), vec![1.0, 4.0]);
        assert_eq!(g.wrt(b), vec![2.0, 3.0, 5.0, 6.0]);
        assert_eq!(g.wrt(r), vec![17.0, 19.0, 21.0]);
    }
}
