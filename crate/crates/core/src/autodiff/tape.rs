//! Tensor-level reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to [`Var`]s created on it.
//! [`Tape::backward`] walks the record in reverse and returns a
//! [`Gradients`] holding the adjoint of every node that requires a
//! gradient. Parameters enter the tape through [`Tape::param`], which loads
//! each [`ParamId`] once per tape so its gradient is accumulated in a single
//! node.
//!
//! Broadcast rules (all ops view tensors as matrices, see [`Tensor`]):
//!
//! - `add`, `sub`, `mul`: the right operand has the same shape as the left,
//!   or is a `1 x n` row broadcast over every row of an `m x n` left operand.
//! - `matmul`: `m x k` by `k x n`. `matmul_t`: `m x k` by `n x k` (right
//!   operand transposed).
//! - `concat`: axis 0 stacks rows (equal column counts), axis 1 joins columns
//!   (equal row counts).
//! - `softmax`, `log_softmax`, `logsumexp`: applied per row.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use super::params::{GradStore, ParamId, ParamStore};
use super::tensor::{log_sum_exp, Tensor};
use crate::error::{Error, Result};

/// Backward rule for operations defined outside this module.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Returns the gradient for each input given the output gradient.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Tanh(usize),
    Sigmoid(usize),
    Softmax(usize),
    LogSoftmax(usize),
    LogSumExp(usize),
    Sum(usize),
    Concat(Vec<usize>, usize),
    Slice {
        input: usize,
        axis: usize,
        start: usize,
    },
    Gather(usize, Vec<usize>),
    Pick(usize, Vec<(usize, usize)>),
    PairAdd(usize, usize),
    Reshape(usize),
    Custom(Vec<usize>, Box<dyn CustomOp>),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recording of a computation. Not shared across threads; give each worker
/// its own tape.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<ParamId, usize>>,
    record: bool,
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.value().shape())
            .finish()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::with_capacity(1024)),
            params: RefCell::new(HashMap::new()),
            record: true,
        }
    }

    /// A tape that keeps values but never records backward information.
    pub fn inference() -> Self {
        Tape {
            record: false,
            ..Tape::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        self.push_arc(Arc::new(value), op, requires_grad)
    }

    fn push_arc(&self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var<'_> {
        let (op, requires_grad) = if self.record && requires_grad {
            (op, true)
        } else {
            (Op::Leaf, false)
        };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Input that does not receive a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// Input that receives a gradient.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Loads a parameter. Repeated loads of the same id return the same node.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        if let Some(&node) = self.params.borrow().get(&id) {
            return Var {
                tape: self,
                id: node,
            };
        }
        let v = self.push_arc(store.get(id).clone(), Op::Param(id), true);
        self.params.borrow_mut().insert(id, v.id);
        v
    }

    /// Records an operation whose backward rule lives outside this module.
    pub fn custom<'t>(&'t self, inputs: &[Var<'t>], value: Tensor, op: Box<dyn CustomOp>) -> Var<'t> {
        let rg = inputs.iter().any(|v| v.requires_grad());
        self.push(value, Op::Custom(inputs.iter().map(|v| v.id).collect(), op), rg)
    }

    fn value(&self, id: usize) -> Arc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let n = nodes.len();
        let lv = &nodes[loss.id].value;
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            propagate(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let params = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, node)| match node.op {
                Op::Param(pid) => Some((pid, i)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, f: impl FnOnce(&mut [f64])) {
    if !nodes[id].requires_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]);
    f(slot);
}

/// Sums rows of `g` (`m x n`) into `dst` (`n`).
fn add_col_sums(dst: &mut [f64], g: &[f64], n: usize) {
    for row in g.chunks(n) {
        for (d, v) in dst.iter_mut().zip(row) {
            *d += v;
        }
    }
}

fn propagate(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf | Op::Param(_) => {}
        &Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            let (m, k, n) = (av.rows(), av.cols(), bv.cols());
            acc(grads, nodes, a, |da| {
                // da = g * b^T
                let bd = bv.data();
                for i in 0..m {
                    let gr = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let br = &bd[p * n..(p + 1) * n];
                        da[i * k + p] += dot(gr, br);
                    }
                }
            });
            acc(grads, nodes, b, |db| {
                // db = a^T * g
                let ad = av.data();
                for i in 0..m {
                    let gr = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let a_ip = ad[i * k + p];
                        if a_ip == 0.0 {
                            continue;
                        }
                        let dr = &mut db[p * n..(p + 1) * n];
                        for (d, gv) in dr.iter_mut().zip(gr) {
                            *d += a_ip * gv;
                        }
                    }
                }
            });
        }
        &Op::MatMulT(a, b) => {
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            let (m, k, n) = (av.rows(), av.cols(), bv.rows());
            acc(grads, nodes, a, |da| {
                // da = g * b
                let bd = bv.data();
                for i in 0..m {
                    let dr = &mut da[i * k..(i + 1) * k];
                    for j in 0..n {
                        let gij = g[i * n + j];
                        for (d, bv) in dr.iter_mut().zip(&bd[j * k..(j + 1) * k]) {
                            *d += gij * bv;
                        }
                    }
                }
            });
            acc(grads, nodes, b, |db| {
                // db = g^T * a
                let ad = av.data();
                for i in 0..m {
                    let ar = &ad[i * k..(i + 1) * k];
                    for j in 0..n {
                        let gij = g[i * n + j];
                        for (d, av) in db[j * k..(j + 1) * k].iter_mut().zip(ar) {
                            *d += gij * av;
                        }
                    }
                }
            });
        }
        &Op::Add(a, b) | &Op::Sub(a, b) => {
            let sign = if matches!(nodes[id].op, Op::Sub(..)) { -1.0 } else { 1.0 };
            acc(grads, nodes, a, |da| add_into(da, g));
            let bcast = nodes[b].value.len() != g.len();
            acc(grads, nodes, b, |db| {
                if bcast {
                    let mut tmp = vec![0.0; db.len()];
                    add_col_sums(&mut tmp, g, db.len());
                    for (d, t) in db.iter_mut().zip(tmp) {
                        *d += sign * t;
                    }
                } else {
                    for (d, gv) in db.iter_mut().zip(g) {
                        *d += sign * gv;
                    }
                }
            });
        }
        &Op::Mul(a, b) => {
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            let n = bv.len();
            let bcast = n != av.len();
            acc(grads, nodes, a, |da| {
                let bd = bv.data();
                for (i, (d, gv)) in da.iter_mut().zip(g).enumerate() {
                    *d += gv * bd[if bcast { i % n } else { i }];
                }
            });
            acc(grads, nodes, b, |db| {
                let ad = av.data();
                for (i, (gv, x)) in g.iter().zip(ad).enumerate() {
                    db[if bcast { i % n } else { i }] += gv * x;
                }
            });
        }
        &Op::Scale(a, s) => acc(grads, nodes, a, |da| {
            for (d, gv) in da.iter_mut().zip(g) {
                *d += s * gv;
            }
        }),
        &Op::Tanh(a) => acc(grads, nodes, a, |da| {
            for ((d, gv), y) in da.iter_mut().zip(g).zip(out.data()) {
                *d += gv * (1.0 - y * y);
            }
        }),
        &Op::Sigmoid(a) => acc(grads, nodes, a, |da| {
            for ((d, gv), y) in da.iter_mut().zip(g).zip(out.data()) {
                *d += gv * y * (1.0 - y);
            }
        }),
        &Op::Softmax(a) => {
            let n = out.cols();
            acc(grads, nodes, a, |da| {
                for ((dr, gr), yr) in da.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n)) {
                    let s = dot(gr, yr);
                    for ((d, gv), y) in dr.iter_mut().zip(gr).zip(yr) {
                        *d += y * (gv - s);
                    }
                }
            });
        }
        &Op::LogSoftmax(a) => {
            let n = out.cols();
            acc(grads, nodes, a, |da| {
                for ((dr, gr), yr) in da.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n)) {
                    let s: f64 = gr.iter().sum();
                    for ((d, gv), y) in dr.iter_mut().zip(gr).zip(yr) {
                        *d += gv - y.exp() * s;
                    }
                }
            });
        }
        &Op::LogSumExp(a) => {
            let av = &nodes[a].value;
            let n = av.cols();
            acc(grads, nodes, a, |da| {
                for (r, (dr, xr)) in da.chunks_mut(n).zip(av.data().chunks(n)).enumerate() {
                    let lse = out.data()[r];
                    for (d, x) in dr.iter_mut().zip(xr) {
                        *d += g[r] * (x - lse).exp();
                    }
                }
            });
        }
        &Op::Sum(a) => acc(grads, nodes, a, |da| {
            for d in da.iter_mut() {
                *d += g[0];
            }
        }),
        Op::Concat(inputs, axis) => {
            let n_out = out.cols();
            let mut offset = 0;
            for &inp in inputs {
                let v = &nodes[inp].value;
                let (r, c) = (v.rows(), v.cols());
                acc(grads, nodes, inp, |di| {
                    if *axis == 0 {
                        add_into(di, &g[offset * n_out..(offset + r) * n_out]);
                    } else {
                        for row in 0..r {
                            let src = &g[row * n_out + offset..row * n_out + offset + c];
                            add_into(&mut di[row * c..(row + 1) * c], src);
                        }
                    }
                });
                offset += if *axis == 0 { r } else { c };
            }
        }
        &Op::Slice { input, axis, start } => {
            let iv = &nodes[input].value;
            let (r_in, c_in) = (iv.rows(), iv.cols());
            let (r_out, c_out) = (out.rows(), out.cols());
            acc(grads, nodes, input, |di| {
                if axis == 0 {
                    add_into(&mut di[start * c_in..(start + r_out) * c_in], g);
                } else {
                    for row in 0..r_in {
                        let dst = &mut di[row * c_in + start..row * c_in + start + c_out];
                        add_into(dst, &g[row * c_out..(row + 1) * c_out]);
                    }
                }
            });
        }
        Op::Gather(table, rows) => {
            let c = out.cols();
            acc(grads, nodes, *table, |dt| {
                for (k, &r) in rows.iter().enumerate() {
                    add_into(&mut dt[r * c..(r + 1) * c], &g[k * c..(k + 1) * c]);
                }
            });
        }
        Op::Pick(a, idx) => {
            let c = nodes[*a].value.cols();
            acc(grads, nodes, *a, |da| {
                for (k, &(r, col)) in idx.iter().enumerate() {
                    da[r * c + col] += g[k];
                }
            });
        }
        &Op::PairAdd(a, b) => {
            let (ra, rb, c) = (nodes[a].value.rows(), nodes[b].value.rows(), out.cols());
            acc(grads, nodes, a, |da| {
                for t in 0..ra {
                    for u in 0..rb {
                        let row = &g[(t * rb + u) * c..(t * rb + u + 1) * c];
                        add_into(&mut da[t * c..(t + 1) * c], row);
                    }
                }
            });
            acc(grads, nodes, b, |db| {
                for t in 0..ra {
                    for u in 0..rb {
                        let row = &g[(t * rb + u) * c..(t * rb + u + 1) * c];
                        add_into(&mut db[u * c..(u + 1) * c], row);
                    }
                }
            });
        }
        &Op::Reshape(a) => acc(grads, nodes, a, |da| add_into(da, g)),
        Op::Custom(inputs, op) => {
            let vals: Vec<&Tensor> = inputs.iter().map(|&i| &*nodes[i].value).collect();
            let gs = op.backward(&vals, out, g);
            for (&inp, gi) in inputs.iter().zip(gs) {
                if let Some(gi) = gi {
                    acc(grads, nodes, inp, |di| add_into(di, &gi));
                }
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient of a node; zeros when the node was not reached.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        let shape = v.value().shape().to_vec();
        match &self.grads[v.id] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    /// Parameter gradients aligned with `store`.
    pub fn params(&self, store: &ParamStore) -> GradStore {
        let mut out = GradStore::zeros_like(store);
        self.accumulate_into(&mut out);
        out
    }

    pub fn accumulate_into(&self, out: &mut GradStore) {
        for &(pid, node) in &self.params {
            if let Some(g) = &self.grads[node] {
                out.accumulate(pid, g);
            }
        }
    }
}

fn check_2d(op: &'static str, t: &Tensor) -> Result<()> {
    if t.shape().len() > 2 {
        return Err(Error::invalid(op, format!("expects a matrix, got shape {:?}", t.shape())));
    }
    Ok(())
}

fn map_unary(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect()).expect("same shape")
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_rows(t: &Tensor) -> Tensor {
    let n = t.cols();
    let mut out = Vec::with_capacity(t.len());
    for row in t.data().chunks(n) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut s = 0.0;
        for &x in row {
            let e = (x - m).exp();
            s += e;
            out.push(e);
        }
        for v in &mut out[start..] {
            *v /= s;
        }
    }
    Tensor::new(t.shape().to_vec(), out).expect("same shape")
}

pub(crate) fn log_softmax_rows(t: &Tensor) -> Tensor {
    let n = t.cols();
    let mut out = Vec::with_capacity(t.len());
    for row in t.data().chunks(n) {
        let lse = log_sum_exp(row);
        out.extend(row.iter().map(|x| x - lse));
    }
    Tensor::new(t.shape().to_vec(), out).expect("same shape")
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    fn same_tape(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "variables recorded on different tapes"
        );
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        self.tape.push(value, op, self.requires_grad())
    }

    fn binary(&self, other: &Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        self.same_tape(other);
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(value, op, rg)
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        check_2d("matmul", &a)?;
        check_2d("matmul", &b)?;
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        if b.rows() != k {
            return Err(Error::shape("matmul", a.shape(), b.shape()));
        }
        let mut c = vec![0.0; m * n];
        let (ad, bd) = (a.data(), b.data());
        for i in 0..m {
            let cr = &mut c[i * n..(i + 1) * n];
            for p in 0..k {
                let a_ip = ad[i * k + p];
                if a_ip == 0.0 {
                    continue;
                }
                for (cv, bv) in cr.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                    *cv += a_ip * bv;
                }
            }
        }
        Ok(self.binary(&other, Tensor::matrix(m, n, c)?, Op::MatMul(self.id, other.id)))
    }

    /// `self * other^T`.
    pub fn matmul_t(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        check_2d("matmul_t", &a)?;
        check_2d("matmul_t", &b)?;
        let (m, k, n) = (a.rows(), a.cols(), b.rows());
        if b.cols() != k {
            return Err(Error::shape("matmul_t", a.shape(), b.shape()));
        }
        let mut c = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                c.push(dot(a.row_slice(i), b.row_slice(j)));
            }
        }
        Ok(self.binary(&other, Tensor::matrix(m, n, c)?, Op::MatMulT(self.id, other.id)))
    }

    fn broadcast_zip(
        &self,
        other: &Var<'t>,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (a, b) = (self.value(), other.value());
        let out = if a.shape() == b.shape() {
            a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
        } else if b.rows() == 1 && b.cols() == a.cols() && b.shape().len() <= 2 {
            let n = b.cols();
            a.data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, b.data()[i % n]))
                .collect()
        } else {
            return Err(Error::shape(op, a.shape(), b.shape()));
        };
        Tensor::new(a.shape().to_vec(), out)
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.broadcast_zip(&other, "add", |x, y| x + y)?;
        Ok(self.binary(&other, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.broadcast_zip(&other, "sub", |x, y| x - y)?;
        Ok(self.binary(&other, v, Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.broadcast_zip(&other, "mul", |x, y| x * y)?;
        Ok(self.binary(&other, v, Op::Mul(self.id, other.id)))
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        self.unary(map_unary(&self.value(), |x| s * x), Op::Scale(self.id, s))
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(map_unary(&self.value(), f64::tanh), Op::Tanh(self.id))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(map_unary(&self.value(), sigmoid), Op::Sigmoid(self.id))
    }

    pub fn softmax(&self) -> Var<'t> {
        self.unary(softmax_rows(&self.value()), Op::Softmax(self.id))
    }

    pub fn log_softmax(&self) -> Var<'t> {
        self.unary(log_softmax_rows(&self.value()), Op::LogSoftmax(self.id))
    }

    /// Row-wise log-sum-exp; the result drops the last dimension.
    pub fn logsumexp(&self) -> Var<'t> {
        let v = self.value();
        let data: Vec<f64> = v.data().chunks(v.cols()).map(log_sum_exp).collect();
        let shape = match v.shape().len() {
            0 => Vec::new(),
            n => v.shape()[..n - 1].to_vec(),
        };
        self.unary(Tensor::new(shape, data).expect("shape"), Op::LogSumExp(self.id))
    }

    pub fn sum(&self) -> Var<'t> {
        let s: f64 = self.value().data().iter().sum();
        self.unary(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value().reshape(shape)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    /// Slice `len` rows (axis 0) or columns (axis 1) starting at `start`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let v = self.value();
        check_2d("slice", &v)?;
        let (r, c) = (v.rows(), v.cols());
        let out = match axis {
            0 if start + len <= r => {
                Tensor::matrix(len, c, v.data()[start * c..(start + len) * c].to_vec())?
            }
            1 if start + len <= c => {
                let mut d = Vec::with_capacity(r * len);
                for row in 0..r {
                    d.extend_from_slice(&v.data()[row * c + start..row * c + start + len]);
                }
                Tensor::matrix(r, len, d)?
            }
            _ => {
                return Err(Error::invalid(
                    "slice",
                    format!("axis {axis} range {start}..{} out of bounds for {:?}", start + len, v.shape()),
                ))
            }
        };
        Ok(self.unary(out, Op::Slice {
            input: self.id,
            axis,
            start,
        }))
    }

    /// Rows of `self` at `rows` (embedding lookup, reordering).
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        check_2d("embed_lookup", &v)?;
        let c = v.cols();
        let mut d = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if r >= v.rows() {
                return Err(Error::invalid(
                    "embed_lookup",
                    format!("row {r} out of range for {} rows", v.rows()),
                ));
            }
            d.extend_from_slice(v.row_slice(r));
        }
        Ok(self.unary(Tensor::matrix(rows.len(), c, d)?, Op::Gather(self.id, rows.to_vec())))
    }

    /// Elements at `(row, col)` positions, as a `1 x n` row.
    pub fn pick(&self, idx: &[(usize, usize)]) -> Result<Var<'t>> {
        let v = self.value();
        let mut d = Vec::with_capacity(idx.len());
        for &(r, c) in idx {
            if r >= v.rows() || c >= v.cols() {
                return Err(Error::invalid("pick", format!("({r}, {c}) out of range for {:?}", v.shape())));
            }
            d.push(v.at(r, c));
        }
        Ok(self.unary(Tensor::row(d), Op::Pick(self.id, idx.to_vec())))
    }

    /// Every row of `self` (`T x J`) plus every row of `other` (`U x J`),
    /// giving `(T*U) x J` with row `t*U + u`.
    pub fn pair_add(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.cols() != b.cols() {
            return Err(Error::shape("pair_add", a.shape(), b.shape()));
        }
        let (ra, rb, c) = (a.rows(), b.rows(), a.cols());
        let mut d = Vec::with_capacity(ra * rb * c);
        for t in 0..ra {
            for u in 0..rb {
                d.extend(a.row_slice(t).iter().zip(b.row_slice(u)).map(|(x, y)| x + y));
            }
        }
        Ok(self.binary(&other, Tensor::matrix(ra * rb, c, d)?, Op::PairAdd(self.id, other.id)))
    }
}

/// Joins matrices along rows (axis 0) or columns (axis 1).
pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
    let tape = first.tape;
    let vals: Vec<Arc<Tensor>> = parts.iter().map(|p| p.value()).collect();
    for v in &vals {
        check_2d("concat", v)?;
    }
    let out = match axis {
        0 => {
            let c = vals[0].cols();
            let mut d = Vec::new();
            let mut rows = 0;
            for v in &vals {
                if v.cols() != c {
                    return Err(Error::shape("concat", vals[0].shape(), v.shape()));
                }
                d.extend_from_slice(v.data());
                rows += v.rows();
            }
            Tensor::matrix(rows, c, d)?
        }
        1 => {
            let r = vals[0].rows();
            let mut c = 0;
            for v in &vals {
                if v.rows() != r {
                    return Err(Error::shape("concat", vals[0].shape(), v.shape()));
                }
                c += v.cols();
            }
            let mut d = Vec::with_capacity(r * c);
            for row in 0..r {
                for v in &vals {
                    d.extend_from_slice(v.row_slice(row));
                }
            }
            Tensor::matrix(r, c, d)?
        }
        _ => return Err(Error::invalid("concat", format!("axis {axis} not supported"))),
    };
    for p in parts {
        first.same_tape(p);
    }
    let rg = parts.iter().any(|p| p.requires_grad());
    Ok(tape.push(out, Op::Concat(parts.iter().map(|p| p.id).collect(), axis), rg))
}

/// Named primitive operations, for generic dispatch and property suites.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    MatMul,
    Add,
    Mul,
    Tanh,
    Sigmoid,
    Softmax,
    LogSoftmax,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    EmbedLookup { ids: Vec<usize> },
    LogSumExp,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Softmax => "softmax",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::Concat { .. } => "concat",
            OpKind::Slice { .. } => "slice",
            OpKind::EmbedLookup { .. } => "embed_lookup",
            OpKind::LogSumExp => "logsumexp",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            OpKind::MatMul | OpKind::Add | OpKind::Mul => Some(2),
            OpKind::Concat { .. } => None,
            _ => Some(1),
        }
    }
}

pub fn forward_op<'t>(kind: &OpKind, inputs: &[Var<'t>]) -> Result<Var<'t>> {
    if let Some(n) = kind.arity() {
        if inputs.len() != n {
            return Err(Error::invalid(
                kind.name(),
                format!("expects {n} inputs, got {}", inputs.len()),
            ));
        }
    }
    match kind {
        OpKind::MatMul => inputs[0].matmul(inputs[1]),
        OpKind::Add => inputs[0].add(inputs[1]),
        OpKind::Mul => inputs[0].mul(inputs[1]),
        OpKind::Tanh => Ok(inputs[0].tanh()),
        OpKind::Sigmoid => Ok(inputs[0].sigmoid()),
        OpKind::Softmax => Ok(inputs[0].softmax()),
        OpKind::LogSoftmax => Ok(inputs[0].log_softmax()),
        OpKind::Concat { axis } => concat(inputs, *axis),
        OpKind::Slice { axis, start, len } => inputs[0].slice(*axis, *start, *len),
        OpKind::EmbedLookup { ids } => inputs[0].gather_rows(ids),
        OpKind::LogSumExp => Ok(inputs[0].logsumexp()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, d: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, d.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_uniform_logits() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::row(vec![0.0; 3]));
        let y = x.softmax().value();
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_matmul() {
        let tape = Tape::new();
        let a = m(3, 2, &[1.0, -2.0, 3.5, 0.25, -1.0, 7.0]);
        let i = tape.constant(Tensor::identity(3));
        let out = i.matmul(tape.constant(a.clone())).unwrap();
        assert_eq!(*out.value(), a);
    }

    #[test]
    fn logsumexp_single_element() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1], vec![-4.75]).unwrap());
        assert_eq!(x.logsumexp().value().item(), -4.75);
    }

    #[test]
    fn product_rule() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let y = tape.leaf(Tensor::scalar(3.0));
        let z = x.mul(y).unwrap();
        let g = tape.backward(z).unwrap();
        assert_eq!(g.wrt(x).item(), 3.0);
        assert_eq!(g.wrt(y).item(), 2.0);
    }

    #[test]
    fn tanh_slope_at_zero() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        let g = tape.backward(x.tanh()).unwrap();
        assert_eq!(g.wrt(x).item(), 1.0);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::row(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x.tanh()), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shape_error_names_op_and_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = a.matmul(b).unwrap_err();
        match err {
            Error::Shape { op, lhs, rhs } => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn unreached_leaf_has_zero_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::row(vec![1.0, 2.0]));
        let unused = tape.leaf(Tensor::row(vec![5.0]));
        let g = tape.backward(x.sum()).unwrap();
        assert_eq!(g.wrt(unused).data(), &[0.0]);
    }

    #[test]
    fn inference_tape_records_nothing() {
        let tape = Tape::inference();
        let x = tape.leaf(Tensor::scalar(1.0));
        assert!(!x.requires_grad());
        let g = tape.backward(x.tanh()).unwrap();
        assert_eq!(g.wrt(x).item(), 0.0);
    }

    #[test]
    fn row_broadcast_add_sums_gradient_over_rows() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[3, 2]));
        let b = tape.leaf(Tensor::row(vec![1.0, 2.0]));
        let g = tape.backward(a.add(b).unwrap().sum()).unwrap();
        assert_eq!(g.wrt(b).data(), &[3.0, 3.0]);
    }

    #[test]
    fn forward_op_checks_arity() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(forward_op(&OpKind::MatMul, &[a]).is_err());
        assert!(forward_op(&OpKind::Tanh, &[a]).is_ok());
    }
}
