//! Eager reverse-mode differentiation over dense matrices.
//!
//! Every operation evaluates immediately and appends a node to the [`Tape`].
//! Nodes only reference earlier nodes, so the tape is always in topological
//! order and [`Tape::backward`] is a single reverse sweep.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::matrix::{canonical_sum, Matrix, SparseMatrix, MASKED};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRowBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    LeakyRelu(Var, f64),
    SoftmaxRows(Var),
    SegmentSoftmax(Var, Rc<SparseMatrix>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SelectCol(Var, usize),
    MeanOver(Vec<Var>),
    Sum(Var),
    RowDot(Var, Var),
    ScaleRows(Var, Var),
    Spmm(Rc<SparseMatrix>, Var),
    Bce(Var, Rc<Matrix>, Rc<Matrix>, f64),
    Mse(Var, Rc<Matrix>, Rc<Matrix>, f64),
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::AddRowBias(..) => "add_row_bias",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::SegmentSoftmax(..) => "segment_softmax",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::SelectCol(..) => "select_col",
            Op::MeanOver(..) => "mean_over",
            Op::Sum(..) => "sum",
            Op::RowDot(..) => "row_dot",
            Op::ScaleRows(..) => "scale_rows",
            Op::Spmm(..) => "spmm",
            Op::Bce(..) => "bce",
            Op::Mse(..) => "mse",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::AddRowBias(a, b)
            | Op::Mul(a, b)
            | Op::RowDot(a, b)
            | Op::ScaleRows(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::LeakyRelu(a, _)
            | Op::SoftmaxRows(a)
            | Op::SegmentSoftmax(a, _)
            | Op::SelectCol(a, _)
            | Op::Sum(a)
            | Op::Spmm(_, a)
            | Op::Bce(a, ..)
            | Op::Mse(a, ..) => vec![*a],
            Op::ConcatCols(v) | Op::ConcatRows(v) | Op::MeanOver(v) => v.clone(),
        }
    }
}

struct Node {
    value: Matrix,
    op: Op,
    /// False when no differentiable leaf feeds this node.
    tracked: bool,
}

/// Probability clamp used by the cross-entropy loss.
const PROB_EPS: f64 = 1e-12;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Matrix>>,
}

fn same_shape(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

fn zip_map(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Matrix::from_raw(a.rows(), a.cols(), data)
}

fn map(a: &Matrix, f: impl Fn(f64) -> f64) -> Matrix {
    Matrix::from_raw(a.rows(), a.cols(), a.data().iter().map(|&x| f(x)).collect())
}

fn add_into(acc: &mut Matrix, g: &Matrix) {
    for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
        *a += v;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn op_tag(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.tag()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Result<Var> {
        value.check_finite(op.tag())?;
        let tracked = op.inputs().iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node { value, op, tracked });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a differentiable input.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input that never receives a gradient; [`Tape::grad`]
    /// reports zeros for it and for everything computed only from constants.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_raw(self.value(b))?;
        self.push(value, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push(value, Op::Sub(a, b))
    }

    /// Adds a `1 × cols` bias to every row of `x`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(Error::Dimension {
                op: "add_row_bias",
                left: xv.shape(),
                right: bv.shape(),
            });
        }
        let mut value = xv.clone();
        for r in 0..value.rows() {
            for (o, b) in value.row_mut(r).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        self.push(value, Op::AddRowBias(x, bias))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push(value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = map(self.value(a), |x| x * c);
        self.push(value, Op::Scale(a, c))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = map(self.value(a), sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let value = map(self.value(a), f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    /// `max(x, slope·x)`; the derivative at exactly zero is taken as 1.
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        if !(slope > 0.0 && slope < 1.0) {
            return Err(Error::Contract(format!("leaky slope {slope} outside (0, 1)")));
        }
        let value = map(self.value(a), |x| if x >= 0.0 { x } else { slope * x });
        self.push(value, Op::LeakyRelu(a, slope))
    }

    /// Row-wise softmax. Mask entries are `0` (keep) or [`MASKED`] (drop);
    /// dropped entries come out as exactly zero.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<Rc<Matrix>>) -> Result<Var> {
        let xv = self.value(x);
        if let Some(m) = &mask {
            same_shape("softmax_rows", xv, m)?;
        }
        let value = softmax_rows_value(xv, mask.as_deref())?;
        self.push(value, Op::SoftmaxRows(x))
    }

    /// Softmax over groups of entries of an `m × 1` column. `groups` is an
    /// `n_groups × m` segment-sum operator (see [`SparseMatrix::segment_sum`]).
    pub fn segment_softmax(&mut self, x: Var, groups: Rc<SparseMatrix>) -> Result<Var> {
        let xv = self.value(x);
        if xv.cols() != 1 || groups.cols() != xv.rows() {
            return Err(Error::Dimension {
                op: "segment_softmax",
                left: xv.shape(),
                right: groups.shape(),
            });
        }
        let mut out = vec![0.0; xv.rows()];
        let mut exps = Vec::new();
        for g in 0..groups.rows() {
            let max = groups
                .row_entries(g)
                .map(|(e, _)| xv.get(e, 0))
                .fold(f64::NEG_INFINITY, f64::max);
            exps.clear();
            exps.extend(groups.row_entries(g).map(|(e, _)| (xv.get(e, 0) - max).exp()));
            for ((e, _), &ex) in groups.row_entries(g).zip(exps.iter()) {
                out[e] = ex;
            }
            let total = canonical_sum(&mut exps);
            for (e, _) in groups.row_entries(g) {
                out[e] /= total;
            }
        }
        let value = Matrix::from_raw(xv.rows(), 1, out);
        self.push(value, Op::SegmentSoftmax(x, groups))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let rows = self.value(*first).rows();
        for p in parts {
            if self.value(*p).rows() != rows {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    left: self.value(*first).shape(),
                    right: self.value(*p).shape(),
                });
            }
        }
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let value = Matrix::from_raw(rows, cols, data);
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = self.value(*p);
            if v.cols() != cols {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    left: self.value(*first).shape(),
                    right: v.shape(),
                });
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let value = Matrix::from_raw(rows, cols, data);
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn select_col(&mut self, x: Var, col: usize) -> Result<Var> {
        let xv = self.value(x);
        if col >= xv.cols() {
            return Err(Error::Dimension {
                op: "select_col",
                left: xv.shape(),
                right: (0, col),
            });
        }
        let data = (0..xv.rows()).map(|r| xv.get(r, col)).collect();
        let value = Matrix::from_raw(xv.rows(), 1, data);
        self.push(value, Op::SelectCol(x, col))
    }

    /// Elementwise mean of equally shaped nodes.
    pub fn mean_over(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("mean over an empty set".into()))?;
        let mut acc = self.value(*first).clone();
        for p in &parts[1..] {
            same_shape("mean_over", &acc, self.value(*p))?;
            add_into(&mut acc, self.value(*p));
        }
        let k = parts.len() as f64;
        for a in acc.data_mut() {
            *a /= k;
        }
        self.push(acc, Op::MeanOver(parts.to_vec()))
    }

    /// Sum of all entries, as a 1×1 node.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().sum();
        self.push(Matrix::from_raw(1, 1, vec![total]), Op::Sum(x))
    }

    /// Per-row dot product of two equally shaped matrices, as a column.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("row_dot", av, bv)?;
        let data = (0..av.rows())
            .map(|r| av.row(r).iter().zip(bv.row(r)).map(|(x, y)| x * y).sum())
            .collect();
        let value = Matrix::from_raw(av.rows(), 1, data);
        self.push(value, Op::RowDot(a, b))
    }

    /// Multiplies row `r` of `x` by `w[r]`, where `w` is a column.
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.cols() != 1 || wv.rows() != xv.rows() {
            return Err(Error::Dimension {
                op: "scale_rows",
                left: xv.shape(),
                right: wv.shape(),
            });
        }
        let mut value = xv.clone();
        for r in 0..value.rows() {
            let s = wv.get(r, 0);
            for o in value.row_mut(r) {
                *o *= s;
            }
        }
        self.push(value, Op::ScaleRows(x, w))
    }

    /// Constant sparse matrix times `x`.
    pub fn spmm(&mut self, s: Rc<SparseMatrix>, x: Var) -> Result<Var> {
        let value = s.mul_dense(self.value(x))?;
        self.push(value, Op::Spmm(s, x))
    }

    /// Weighted mean binary cross-entropy of probabilities against 0/1 targets.
    pub fn bce(&mut self, pred: Var, target: Rc<Matrix>, weight: Rc<Matrix>) -> Result<Var> {
        let (p, norm) = self.loss_inputs("bce", pred, &target, &weight)?;
        let mut total = 0.0;
        for ((&pi, &ti), &wi) in p.data().iter().zip(target.data()).zip(weight.data()) {
            if wi != 0.0 {
                let q = pi.clamp(PROB_EPS, 1.0 - PROB_EPS);
                total += wi * -(ti * q.ln() + (1.0 - ti) * (1.0 - q).ln());
            }
        }
        let value = Matrix::from_raw(1, 1, vec![total / norm]);
        self.push(value, Op::Bce(pred, target, weight, norm))
    }

    /// Weighted mean squared error.
    pub fn mse(&mut self, pred: Var, target: Rc<Matrix>, weight: Rc<Matrix>) -> Result<Var> {
        let (p, norm) = self.loss_inputs("mse", pred, &target, &weight)?;
        let total: f64 = p
            .data()
            .iter()
            .zip(target.data())
            .zip(weight.data())
            .map(|((&pi, &ti), &wi)| wi * (pi - ti) * (pi - ti))
            .sum();
        let value = Matrix::from_raw(1, 1, vec![total / norm]);
        self.push(value, Op::Mse(pred, target, weight, norm))
    }

    fn loss_inputs(
        &self,
        op: &'static str,
        pred: Var,
        target: &Matrix,
        weight: &Matrix,
    ) -> Result<(&Matrix, f64)> {
        let p = self.value(pred);
        same_shape(op, p, target)?;
        same_shape(op, p, weight)?;
        let norm: f64 = weight.data().iter().sum();
        if norm <= 0.0 {
            return Err(Error::Contract(format!("{op} over an empty valid set")));
        }
        Ok((p, norm))
    }

    /// Populates gradients of the 1×1 node `loss` with respect to every node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).shape() != (1, 1) {
            let (r, c) = self.value(loss).shape();
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, found {r}x{c}"
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].tracked {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g)?;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Gradient of the last backward pass; zeros for unreachable nodes.
    pub fn grad(&self, v: Var) -> Matrix {
        match self.grads.get(v.0).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.value(v).shape();
                Matrix::zeros(r, c)
            }
        }
    }

    fn accumulate(&mut self, v: Var, g: Matrix) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => add_into(acc, &g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&mut self, i: usize, g: &Matrix) -> Result<()> {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.tracked(a) {
                    let ga = g.matmul_raw(&self.value(b).transpose())?;
                    self.accumulate(a, ga);
                }
                if self.tracked(b) {
                    let gb = self.value(a).transpose().matmul_raw(g)?;
                    self.accumulate(b, gb);
                }
            }
            Op::Transpose(a) => self.accumulate(a, g.transpose()),
            Op::Add(a, b) => {
                self.accumulate(a, g.clone());
                self.accumulate(b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(a, g.clone());
                self.accumulate(b, map(g, |x| -x));
            }
            Op::AddRowBias(x, b) => {
                let mut gb = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (a, v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                        *a += v;
                    }
                }
                self.accumulate(x, g.clone());
                self.accumulate(b, gb);
            }
            Op::Mul(a, b) => {
                let ga = zip_map(g, self.value(b), |x, y| x * y);
                let gb = zip_map(g, self.value(a), |x, y| x * y);
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::Scale(a, c) => self.accumulate(a, map(g, |x| x * c)),
            Op::Sigmoid(a) => {
                let y = &self.nodes[i].value;
                let ga = zip_map(g, y, |gv, yv| gv * yv * (1.0 - yv));
                self.accumulate(a, ga);
            }
            Op::Tanh(a) => {
                let y = &self.nodes[i].value;
                let ga = zip_map(g, y, |gv, yv| gv * (1.0 - yv * yv));
                self.accumulate(a, ga);
            }
            Op::LeakyRelu(a, slope) => {
                let ga = zip_map(g, self.value(a), |gv, x| if x >= 0.0 { gv } else { gv * slope });
                self.accumulate(a, ga);
            }
            Op::SoftmaxRows(x) => {
                let y = &self.nodes[i].value;
                let mut gx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: f64 = y.row(r).iter().zip(g.row(r)).map(|(a, b)| a * b).sum();
                    for ((o, &yv), &gv) in gx.row_mut(r).iter_mut().zip(y.row(r)).zip(g.row(r)) {
                        *o = yv * (gv - dot);
                    }
                }
                self.accumulate(x, gx);
            }
            Op::SegmentSoftmax(x, groups) => {
                let y = &self.nodes[i].value;
                let mut gx = Matrix::zeros(y.rows(), 1);
                for s in 0..groups.rows() {
                    let dot: f64 = groups
                        .row_entries(s)
                        .map(|(e, _)| y.get(e, 0) * g.get(e, 0))
                        .sum();
                    for (e, _) in groups.row_entries(s) {
                        gx.set(e, 0, y.get(e, 0) * (g.get(e, 0) - dot));
                    }
                }
                self.accumulate(x, gx);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = self.value(p).cols();
                    let mut gp = Matrix::zeros(g.rows(), w);
                    for r in 0..g.rows() {
                        gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + w]);
                    }
                    offset += w;
                    self.accumulate(p, gp);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let (h, w) = self.value(p).shape();
                    let gp = Matrix::from_raw(h, w, g.data()[offset * w..(offset + h) * w].to_vec());
                    offset += h;
                    self.accumulate(p, gp);
                }
            }
            Op::SelectCol(x, col) => {
                let (r, c) = self.value(x).shape();
                let mut gx = Matrix::zeros(r, c);
                for row in 0..r {
                    gx.set(row, col, g.get(row, 0));
                }
                self.accumulate(x, gx);
            }
            Op::MeanOver(parts) => {
                let k = parts.len() as f64;
                for p in parts {
                    self.accumulate(p, map(g, |x| x / k));
                }
            }
            Op::Sum(x) => {
                let (r, c) = self.value(x).shape();
                self.accumulate(x, Matrix::filled(r, c, g.get(0, 0)));
            }
            Op::RowDot(a, b) => {
                let mut ga = self.value(b).clone();
                let mut gb = self.value(a).clone();
                for r in 0..g.rows() {
                    let s = g.get(r, 0);
                    ga.row_mut(r).iter_mut().for_each(|v| *v *= s);
                    gb.row_mut(r).iter_mut().for_each(|v| *v *= s);
                }
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::ScaleRows(x, w) => {
                let xv = self.value(x);
                let wv = self.value(w);
                let mut gx = g.clone();
                let mut gw = Matrix::zeros(wv.rows(), 1);
                for r in 0..g.rows() {
                    let s = wv.get(r, 0);
                    gx.row_mut(r).iter_mut().for_each(|v| *v *= s);
                    gw.set(r, 0, g.row(r).iter().zip(xv.row(r)).map(|(a, b)| a * b).sum());
                }
                self.accumulate(x, gx);
                self.accumulate(w, gw);
            }
            Op::Spmm(s, x) => {
                let (r, c) = self.value(x).shape();
                let mut gx = Matrix::zeros(r, c);
                s.add_transposed_product(g, &mut gx);
                self.accumulate(x, gx);
            }
            Op::Bce(pred, target, weight, norm) => {
                let scale = g.get(0, 0) / norm;
                let p = self.value(pred);
                let mut gp = Matrix::zeros(p.rows(), p.cols());
                for (k, o) in gp.data_mut().iter_mut().enumerate() {
                    let w = weight.data()[k];
                    if w != 0.0 {
                        let q = p.data()[k].clamp(PROB_EPS, 1.0 - PROB_EPS);
                        let t = target.data()[k];
                        *o = scale * w * (-t / q + (1.0 - t) / (1.0 - q));
                    }
                }
                self.accumulate(pred, gp);
            }
            Op::Mse(pred, target, weight, norm) => {
                let scale = g.get(0, 0) / norm;
                let p = self.value(pred);
                let data = p
                    .data()
                    .iter()
                    .zip(target.data())
                    .zip(weight.data())
                    .map(|((&pi, &ti), &wi)| scale * wi * 2.0 * (pi - ti))
                    .collect();
                let gp = Matrix::from_raw(p.rows(), p.cols(), data);
                self.accumulate(pred, gp);
            }
        }
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Forward value of [`Tape::softmax_rows`], usable without a tape.
pub fn softmax_rows_value(x: &Matrix, mask: Option<&Matrix>) -> Result<Matrix> {
    let (rows, cols) = x.shape();
    let mut out = Matrix::zeros(rows, cols);
    for r in 0..rows {
        let keep = |c: usize| mask.is_none_or(|m| m.get(r, c) != MASKED);
        let max = (0..cols)
            .filter(|&c| keep(c))
            .map(|c| x.get(r, c))
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::DegenerateRow { row: r });
        }
        let mut total = 0.0;
        for c in (0..cols).filter(|&c| keep(c)) {
            let e = (x.get(r, c) - max).exp();
            out.set(r, c, e);
            total += e;
        }
        for o in out.row_mut(r) {
            *o /= total;
        }
    }
    Ok(out)
}
