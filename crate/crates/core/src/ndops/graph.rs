//! Reverse-mode tape over rank-2 tensors.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order; `backward` walks it once in reverse. Parameters are
//! borrowed from a [`ParamStore`] for the lifetime of the graph.

use std::borrow::Cow;

use super::kernels::{
    matmul_nt_raw, matmul_raw, matmul_tn_raw, rms_inv, sigmoid, silu_scalar, softmax_row,
    transpose_raw,
};
use super::params::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{KonError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Exp(Var),
    LogFloor(Var, f64),
    Softmax(Var),
    CausalSoftmax(Var),
    RmsNorm { x: Var, gain: Var, eps: f64 },
    GatherRows { table: Var, ids: Vec<usize> },
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Pick { x: Var, idx: Vec<usize> },
    Sum(Var),
    Rope { x: Var, head_dim: usize, offset: usize },
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Base of the rotary position frequencies.
const ROPE_BASE: f64 = 10_000.0;

pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
    record: bool,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> KonError {
    KonError::Dimension {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::with_capacity(256),
            record: true,
        }
    }

    /// A graph whose parameters never require gradients.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::with_capacity(256),
            record: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if cfg!(debug_assertions) {
            value.check_finite(&format!("{op:?}"))?;
        }
        let requires_grad = self.record && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn param(&mut self, store: &'p ParamStore, id: ParamId) -> Var {
        let requires_grad = self.record && store.is_trainable(id);
        self.nodes.push(Node {
            value: Cow::Borrowed(store.get(id)),
            op: Op::Input,
            requires_grad,
            param: requires_grad.then_some(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op: Op::Input,
            requires_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A free leaf that records gradients; used by gradient checks.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op: Op::Input,
            requires_grad: self.record,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A gradient-blocked copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn mat(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let t = self.value(v);
        if t.rank() != 2 {
            return Err(KonError::Dimension {
                op,
                lhs: t.shape().to_vec(),
                rhs: vec![],
            });
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat(a, "matmul")?;
        let (k2, n) = self.mat(b, "matmul")?;
        if k != k2 {
            return Err(dim_err("matmul", self.value(a), self.value(b)));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat(a, "matmul_nt")?;
        let (n, k2) = self.mat(b, "matmul_nt")?;
        if k != k2 {
            return Err(dim_err("matmul_nt", self.value(a), self.value(b)));
        }
        let out = matmul_nt_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMulNt(a, b),
            &[a, b],
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.mat(a, "transpose")?;
        let out = transpose_raw(self.value(a).data(), m, n);
        self.push(Tensor::from_parts(vec![n, m], out), Op::Transpose(a), &[a])
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        self.push(t, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        self.push(t, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        self.push(t, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "div", |x, y| x / y)?;
        self.push(t, Op::Div(a, b), &[a, b])
    }

    fn row_broadcast(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        let n = ta.cols();
        if tb.numel() != n {
            return Err(dim_err(name, ta, tb));
        }
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, &r) in row.iter_mut().zip(tb.data()) {
                *v = f(*v, r);
            }
        }
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    /// Adds the `1 × n` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.row_broadcast(a, b, "add_row", |x, y| x + y)?;
        self.push(t, Op::AddRow(a, b), &[a, b])
    }

    /// Multiplies every row of `a` elementwise by `b`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.row_broadcast(a, b, "mul_row", |x, y| x * y)?;
        self.push(t, Op::MulRow(a, b), &[a, b])
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let ta = self.value(a);
        let t = Tensor::from_parts(ta.shape().to_vec(), ta.data().iter().map(|&x| f(x)).collect());
        self.push(t, op, &[a])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.map(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Silu(a), silu_scalar)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Exp(a), f64::exp)
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log_floor(&mut self, a: Var, floor: f64) -> Result<Var> {
        self.map(a, Op::LogFloor(a, floor), |x| x.max(floor).ln())
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let n = ta.cols();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_row(row, n);
        }
        let t = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(t, Op::Softmax(a), &[a])
    }

    /// Row-wise softmax under the lower-triangular mask: row `i` sees
    /// columns `0..=i`.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.mat(a, "causal_softmax")?;
        if m != n {
            return Err(dim_err("causal_softmax", self.value(a), self.value(a)));
        }
        let mut data = self.value(a).data().to_vec();
        for (i, row) in data.chunks_mut(n).enumerate() {
            softmax_row(row, i + 1);
        }
        self.push(Tensor::from_parts(vec![m, n], data), Op::CausalSoftmax(a), &[a])
    }

    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (tx, tg) = (self.value(x), self.value(gain));
        let d = tx.cols();
        if tg.numel() != d {
            return Err(dim_err("rms_norm", tx, tg));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(d) {
            let r = rms_inv(row, eps);
            for (v, g) in row.iter_mut().zip(tg.data()) {
                *v *= r * g;
            }
        }
        let t = Tensor::from_parts(tx.shape().to_vec(), data);
        self.push(t, Op::RmsNorm { x, gain, eps }, &[x, gain])
    }

    /// Rows `ids` of `table`, stacked.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = self.mat(table, "gather_rows")?;
        let tt = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= rows {
                return Err(KonError::Index {
                    what: "gather_rows",
                    index: i,
                    len: rows,
                });
            }
            data.extend_from_slice(tt.row_slice(i));
        }
        let t = Tensor::new(vec![ids.len(), d], data)?;
        self.push(
            t,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.mat(x, "slice_rows")?;
        if start + len > m || len == 0 {
            return Err(KonError::Index {
                what: "slice_rows",
                index: start + len,
                len: m,
            });
        }
        let data = self.value(x).data()[start * n..(start + len) * n].to_vec();
        self.push(
            Tensor::from_parts(vec![len, n], data),
            Op::SliceRows { x, start },
            &[x],
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.mat(x, "slice_cols")?;
        if start + len > n || len == 0 {
            return Err(KonError::Index {
                what: "slice_cols",
                index: start + len,
                len: n,
            });
        }
        let tx = self.value(x);
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&tx.row_slice(r)[start..start + len]);
        }
        self.push(
            Tensor::from_parts(vec![m, len], data),
            Op::SliceCols { x, start },
            &[x],
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.value(parts[0]).cols();
        let mut data = Vec::new();
        for &p in parts {
            let tp = self.value(p);
            if tp.cols() != n || tp.rank() != 2 {
                return Err(dim_err("concat_rows", self.value(parts[0]), tp));
            }
            data.extend_from_slice(tp.data());
        }
        let m = data.len() / n;
        self.push(
            Tensor::from_parts(vec![m, n], data),
            Op::ConcatRows(parts.to_vec()),
            parts,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let tp = self.value(p);
            if tp.rows() != m || tp.rank() != 2 {
                return Err(dim_err("concat_cols", self.value(parts[0]), tp));
            }
            widths.push(tp.cols());
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        self.push(
            Tensor::from_parts(vec![m, n], data),
            Op::ConcatCols(parts.to_vec()),
            parts,
        )
    }

    /// Flat-index gather, reshaped to `shape`.
    pub fn pick(&mut self, x: Var, idx: &[usize], shape: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let len = tx.numel();
        let mut data = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= len {
                return Err(KonError::Index {
                    what: "pick",
                    index: i,
                    len,
                });
            }
            data.push(tx.data()[i]);
        }
        let t = Tensor::new(shape.to_vec(), data)?;
        self.push(
            t,
            Op::Pick {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Rotary position embedding applied per head block of width
    /// `head_dim`; row `i` is rotated as position `offset + i`.
    pub fn rope(&mut self, x: Var, head_dim: usize, offset: usize) -> Result<Var> {
        let (m, n) = self.mat(x, "rope")?;
        if head_dim % 2 != 0 || n % head_dim != 0 {
            return Err(KonError::Dimension {
                op: "rope",
                lhs: vec![m, n],
                rhs: vec![head_dim],
            });
        }
        let mut data = self.value(x).data().to_vec();
        rope_apply(&mut data, n, head_dim, offset, 1.0);
        self.push(
            Tensor::from_parts(vec![m, n], data),
            Op::Rope {
                x,
                head_dim,
                offset,
            },
            &[x],
        )
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(KonError::Dimension {
                op: "backward",
                lhs: lv.shape().to_vec(),
                rhs: vec![1],
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Input) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| Some((n.param?, grads[i].clone()?)))
            .collect();
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backprop(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Input => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if let Some(s) = self.slot(grads, *a) {
                    // dA = G · Bᵀ
                    let d = matmul_nt_raw(g, tb.data(), m, n, k);
                    add_assign(s, &d);
                }
                if let Some(s) = self.slot(grads, *b) {
                    // dB = Aᵀ · G
                    let d = matmul_tn_raw(ta.data(), g, m, k, n);
                    add_assign(s, &d);
                }
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
                if let Some(s) = self.slot(grads, *a) {
                    // dA = G · B
                    let d = matmul_raw(g, tb.data(), m, n, k);
                    add_assign(s, &d);
                }
                if let Some(s) = self.slot(grads, *b) {
                    // dB = Gᵀ · A
                    let d = matmul_tn_raw(g, ta.data(), m, n, k);
                    add_assign(s, &d);
                }
            }
            Op::Transpose(a) => {
                let ta = self.value(*a);
                let (m, n) = (ta.shape()[0], ta.shape()[1]);
                if let Some(s) = self.slot(grads, *a) {
                    add_assign(s, &transpose_raw(g, n, m));
                }
            }
            Op::Add(a, b) => {
                if let Some(s) = self.slot(grads, *a) {
                    add_assign(s, g);
                }
                if let Some(s) = self.slot(grads, *b) {
                    add_assign(s, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(s) = self.slot(grads, *a) {
                    add_assign(s, g);
                }
                if let Some(s) = self.slot(grads, *b) {
                    for (sv, gv) in s.iter_mut().zip(g) {
                        *sv -= gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                if let Some(s) = self.slot(grads, *a) {
                    for ((sv, gv), bv) in s.iter_mut().zip(g).zip(db) {
                        *sv += gv * bv;
                    }
                }
                if let Some(s) = self.slot(grads, *b) {
                    for ((sv, gv), av) in s.iter_mut().zip(g).zip(da) {
                        *sv += gv * av;
                    }
                }
            }
            Op::Div(a, b) => {
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                if let Some(s) = self.slot(grads, *a) {
                    for ((sv, gv), bv) in s.iter_mut().zip(g).zip(db) {
                        *sv += gv / bv;
                    }
                }
                if let Some(s) = self.slot(grads, *b) {
                    for (((sv, gv), av), bv) in s.iter_mut().zip(g).zip(da).zip(db) {
                        *sv -= gv * av / (bv * bv);
                    }
                }
            }
            Op::AddRow(a, b) => {
                let n = self.value(*a).cols();
                if let Some(s) = self.slot(grads, *a) {
                    add_assign(s, g);
                }
                if let Some(s) = self.slot(grads, *b) {
                    for grow in g.chunks(n) {
                        add_assign(s, grow);
                    }
                }
            }
            Op::MulRow(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let n = ta.cols();
                if let Some(s) = self.slot(grads, *a) {
                    for (srow, grow) in s.chunks_mut(n).zip(g.chunks(n)) {
                        for ((sv, gv), bv) in srow.iter_mut().zip(grow).zip(tb.data()) {
                            *sv += gv * bv;
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *b) {
                    for (arow, grow) in ta.data().chunks(n).zip(g.chunks(n)) {
                        for ((sv, gv), av) in s.iter_mut().zip(grow).zip(arow) {
                            *sv += gv * av;
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(s) = self.slot(grads, *a) {
                    for (sv, gv) in s.iter_mut().zip(g) {
                        *sv += gv * c;
                    }
                }
            }
            Op::Silu(a) => {
                let xa = self.value(*a).data();
                if let Some(s) = self.slot(grads, *a) {
                    for ((sv, gv), &x) in s.iter_mut().zip(g).zip(xa) {
                        let sg = sigmoid(x);
                        *sv += gv * sg * (1.0 + x * (1.0 - sg));
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(s) = self.slot(grads, *a) {
                    for ((sv, gv), yv) in s.iter_mut().zip(g).zip(y) {
                        *sv += gv * yv;
                    }
                }
            }
            Op::LogFloor(a, floor) => {
                let xa = self.value(*a).data();
                if let Some(s) = self.slot(grads, *a) {
                    for ((sv, gv), &x) in s.iter_mut().zip(g).zip(xa) {
                        if x > *floor {
                            *sv += gv / x;
                        }
                    }
                }
            }
            Op::Softmax(a) | Op::CausalSoftmax(a) => {
                let n = node.value.cols();
                if let Some(s) = self.slot(grads, *a) {
                    for ((srow, grow), yrow) in s.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((sv, gv), yv) in srow.iter_mut().zip(grow).zip(yrow) {
                            *sv += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::RmsNorm { x, gain, eps } => {
                let (tx, tg) = (self.value(*x), self.value(*gain));
                let d = tx.cols();
                let gd = tg.data();
                let rs: Vec<f64> = tx.data().chunks(d).map(|r| rms_inv(r, *eps)).collect();
                if let Some(s) = self.slot(grads, *gain) {
                    for ((xrow, grow), r) in tx.data().chunks(d).zip(g.chunks(d)).zip(&rs) {
                        for ((sv, gv), xv) in s.iter_mut().zip(grow).zip(xrow) {
                            *sv += gv * xv * r;
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *x) {
                    for (((srow, xrow), grow), r) in s
                        .chunks_mut(d)
                        .zip(tx.data().chunks(d))
                        .zip(g.chunks(d))
                        .zip(&rs)
                    {
                        let dot: f64 = grow
                            .iter()
                            .zip(gd)
                            .zip(xrow)
                            .map(|((gv, gn), xv)| gv * gn * xv)
                            .sum();
                        let c = r * r * r * dot / d as f64;
                        for (((sv, gv), gn), xv) in srow.iter_mut().zip(grow).zip(gd).zip(xrow) {
                            *sv += r * gn * gv - c * xv;
                        }
                    }
                }
            }
            Op::GatherRows { table, ids } => {
                let d = self.value(*table).cols();
                if let Some(s) = self.slot(grads, *table) {
                    for (grow, &id) in g.chunks(d).zip(ids) {
                        add_assign(&mut s[id * d..(id + 1) * d], grow);
                    }
                }
            }
            Op::SliceRows { x, start } => {
                let n = self.value(*x).cols();
                if let Some(s) = self.slot(grads, *x) {
                    add_assign(&mut s[start * n..start * n + g.len()], g);
                }
            }
            Op::SliceCols { x, start } => {
                let n = self.value(*x).cols();
                let w = node.value.cols();
                if let Some(s) = self.slot(grads, *x) {
                    for (r, grow) in g.chunks(w).enumerate() {
                        add_assign(&mut s[r * n + start..r * n + start + w], grow);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).numel();
                    if let Some(s) = self.slot(grads, *p) {
                        add_assign(s, &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let n = node.value.cols();
                let mut col = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if let Some(s) = self.slot(grads, *p) {
                        for (srow, grow) in s.chunks_mut(w).zip(g.chunks(n)) {
                            add_assign(srow, &grow[col..col + w]);
                        }
                    }
                    col += w;
                }
            }
            Op::Pick { x, idx } => {
                if let Some(s) = self.slot(grads, *x) {
                    for (gv, &i) in g.iter().zip(idx) {
                        s[i] += gv;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(s) = self.slot(grads, *x) {
                    for sv in s.iter_mut() {
                        *sv += g[0];
                    }
                }
            }
            Op::Rope {
                x,
                head_dim,
                offset,
            } => {
                let n = node.value.cols();
                if let Some(s) = self.slot(grads, *x) {
                    let mut back = g.to_vec();
                    rope_apply(&mut back, n, *head_dim, *offset, -1.0);
                    add_assign(s, &back);
                }
            }
        }
    }
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn rope_apply(data: &mut [f64], n: usize, head_dim: usize, offset: usize, sign: f64) {
    let half = head_dim / 2;
    for (r, row) in data.chunks_mut(n).enumerate() {
        let pos = (offset + r) as f64;
        for head in row.chunks_mut(head_dim) {
            for i in 0..half {
                let theta = pos * ROPE_BASE.powf(-2.0 * i as f64 / head_dim as f64);
                let (s, c) = (sign * theta).sin_cos();
                let (x0, x1) = (head[2 * i], head[2 * i + 1]);
                head[2 * i] = x0 * c - x1 * s;
                head[2 * i + 1] = x0 * s + x1 * c;
            }
        }
    }
}

/// Output of [`Graph::backward`].
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Vec<f64>)>,
}

impl Gradients {
    /// Gradient with respect to a leaf, if it received any.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].as_deref()
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params.iter().map(|(id, g)| (*id, g.as_slice()))
    }
}
