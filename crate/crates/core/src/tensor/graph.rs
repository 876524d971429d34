use std::collections::HashMap;

use super::params::ParamKey;
use super::{
    attention_forward, gelu, gelu_grad, gemm, layer_norm_forward, log_softmax_into, matmul, matmul_t, sigmoid, Matrix,
};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamKey),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    AddScalar(Var),
    Exp(Var),
    Log(Var, f64),
    Log1m(Var, f64),
    Sigmoid(Var),
    Relu(Var),
    Tanh(Var),
    Gelu(Var),
    Square(Var),
    Min(Var, Var),
    Clamp(Var, f64, f64),
    LayerNorm { x: Var, gamma: Var, beta: Var, means: Vec<f64>, rstds: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, heads: usize, causal: bool, segs: Vec<(usize, usize)>, probs: Vec<f64> },
    EmbedSum { table: Var, idx: Vec<usize>, per_row: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    MeanRows(Var),
    SumRows(Var),
    SumCols(Var),
    SumAll(Var),
    RowNormalize(Var, f64, Vec<f64>),
    LogSoftmaxRows(Var),
    PickCols(Var, Vec<usize>),
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Per-parameter gradients produced by [`Graph::backward`].
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    map: HashMap<ParamKey, Matrix>,
}

impl Gradients {
    pub fn get(&self, key: ParamKey) -> Option<&Matrix> {
        self.map.get(&key)
    }

    pub fn insert(&mut self, key: ParamKey, g: Matrix) {
        match self.map.get_mut(&key) {
            Some(m) => m.add_assign(&g),
            None => {
                self.map.insert(key, g);
            }
        }
    }

    pub fn merge(&mut self, other: Gradients) {
        for (k, g) in other.map {
            self.insert(k, g);
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &ParamKey> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// L2 norm over the gradients of the given store.
    pub fn norm_for_store(&self, store: u64) -> f64 {
        let mut keys: Vec<_> = self.map.keys().filter(|k| k.store == store).collect();
        keys.sort();
        keys.iter().map(|k| self.map[k].frobenius_sq()).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(Matrix::all_finite)
    }
}

/// A tape of operations recorded in evaluation order.
///
/// Values are computed eagerly when an op is recorded; [`Graph::backward`]
/// walks the tape in reverse.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamKey, Var>,
}

fn sum_rows(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, m.cols());
    for r in 0..m.rows() {
        for (o, x) in out.data_mut().iter_mut().zip(m.row(r)) {
            *o += x;
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, false)
    }

    pub fn param(&mut self, key: ParamKey, value: &Matrix, trainable: bool) -> Var {
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.push(value.clone(), Op::Param(key), trainable);
        self.params.insert(key, v);
        v
    }

    /// Same value, cut from the gradient tape.
    pub fn detach(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.constant(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = matmul(self.value(a), self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    /// `a * b^T`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = matmul_t(self.value(a), self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMulT(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(v, Op::Transpose(a), ng)
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Matrix {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "elementwise shape mismatch");
        Matrix::from_vec(x.rows(), x.cols(), x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip(a, b, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip(a, b, |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip(a, b, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn min(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip(a, b, f64::min);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Min(a, b), ng)
    }

    /// `a + row` with `row` of shape `(1, cols)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!(r.shape(), (1, x.cols()), "add_row shape mismatch");
        let mut v = x.clone();
        for i in 0..v.rows() {
            for (o, b) in v.row_mut(i).iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(v, Op::AddRow(a, row), ng)
    }

    /// `a * col` with `col` of shape `(rows, 1)` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (x, c) = (self.value(a), self.value(col));
        assert_eq!(c.shape(), (x.rows(), 1), "mul_col shape mismatch");
        let mut v = x.clone();
        for i in 0..v.rows() {
            let s = c.data()[i];
            for o in v.row_mut(i) {
                *o *= s;
            }
        }
        let ng = self.ng(a) || self.ng(col);
        self.push(v, Op::MulCol(a, col), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, s), ng)
    }

    /// `a * s` with `s` a `(1, 1)` node.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let k = self.scalar(s);
        let v = self.value(a).map(|x| x * k);
        let ng = self.ng(a) || self.ng(s);
        self.push(v, Op::ScaleBy(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        let ng = self.ng(a);
        self.push(v, Op::AddScalar(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        let ng = self.ng(a);
        self.push(v, Op::Exp(a), ng)
    }

    /// `ln(max(a, eps))`
    pub fn log(&mut self, a: Var, eps: f64) -> Var {
        let v = self.value(a).map(|x| x.max(eps).ln());
        let ng = self.ng(a);
        self.push(v, Op::Log(a, eps), ng)
    }

    /// `ln(max(1 - a, eps))`
    pub fn log1m(&mut self, a: Var, eps: f64) -> Var {
        let v = self.value(a).map(|x| (1.0 - x).max(eps).ln());
        let ng = self.ng(a);
        self.push(v, Op::Log1m(a, eps), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(v, Op::Sigmoid(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(v, Op::Relu(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(v, Op::Tanh(a), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        let ng = self.ng(a);
        self.push(v, Op::Gelu(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        let ng = self.ng(a);
        self.push(v, Op::Square(a), ng)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        let ng = self.ng(a);
        self.push(v, Op::Clamp(a, lo, hi), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (v, means, rstds) =
            layer_norm_forward(self.value(x), self.value(gamma).data(), self.value(beta).data(), eps);
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(v, Op::LayerNorm { x, gamma, beta, means, rstds }, ng)
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Var {
        let rows = self.value(q).rows();
        self.attention_segments(q, k, v, heads, causal, vec![(0, rows)])
    }

    /// Self-attention where each `(start, len)` row block is an independent sequence.
    pub fn attention_segments(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        causal: bool,
        segs: Vec<(usize, usize)>,
    ) -> Var {
        let rows = self.value(q).rows();
        assert!(
            self.value(k).rows() == rows && self.value(v).rows() == rows,
            "self-attention needs equal q/k/v heights"
        );
        assert!(segs.iter().all(|&(s, l)| s + l <= rows));
        let (out, probs) = attention_forward(self.value(q), self.value(k), self.value(v), heads, causal, &segs);
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(out, Op::Attention { q, k, v, heads, causal, segs, probs }, ng)
    }

    /// Row `r` of the result is the sum of `table` rows `idx[r*per_row..(r+1)*per_row]`.
    /// With `per_row == 1` this is an embedding lookup.
    pub fn embed_sum(&mut self, table: Var, idx: Vec<usize>, per_row: usize) -> Var {
        assert!(per_row > 0 && idx.len().is_multiple_of(per_row));
        let t = self.value(table);
        let rows = idx.len() / per_row;
        let mut v = Matrix::zeros(rows, t.cols());
        for r in 0..rows {
            let out = v.row_mut(r);
            for &i in &idx[r * per_row..(r + 1) * per_row] {
                for (o, x) in out.iter_mut().zip(t.row(i)) {
                    *o += x;
                }
            }
        }
        let ng = self.ng(table);
        self.push(v, Op::EmbedSum { table, idx, per_row }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut v = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for p in parts {
                let m = self.value(*p);
                assert_eq!(m.rows(), rows, "concat_cols row mismatch");
                v.row_mut(r)[off..off + m.cols()].copy_from_slice(m.row(r));
                off += m.cols();
            }
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(v, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let m = self.value(*p);
            assert_eq!(m.cols(), cols, "concat_rows col mismatch");
            data.extend_from_slice(m.data());
            rows += m.rows();
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice_rows(start, len);
        let ng = self.ng(a);
        self.push(v, Op::SliceRows(a, start), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let m = self.value(a);
        assert!(start + len <= m.cols());
        let mut v = Matrix::zeros(m.rows(), len);
        for r in 0..m.rows() {
            v.row_mut(r).copy_from_slice(&m.row(r)[start..start + len]);
        }
        let ng = self.ng(a);
        self.push(v, Op::SliceCols(a, start), ng)
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let m = self.value(a);
        let mut v = Matrix::zeros(idx.len(), m.cols());
        for (r, &i) in idx.iter().enumerate() {
            v.row_mut(r).copy_from_slice(m.row(i));
        }
        let ng = self.ng(a);
        self.push(v, Op::GatherRows(a, idx), ng)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let n = m.rows() as f64;
        let v = sum_rows(m).map(|x| x / n);
        let ng = self.ng(a);
        self.push(v, Op::MeanRows(a), ng)
    }

    /// Column sums, `(1, cols)`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = sum_rows(self.value(a));
        let ng = self.ng(a);
        self.push(v, Op::SumRows(a), ng)
    }

    /// Row sums, `(rows, 1)`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let v = Matrix::from_vec(m.rows(), 1, (0..m.rows()).map(|r| m.row(r).iter().sum()).collect());
        let ng = self.ng(a);
        self.push(v, Op::SumCols(a), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Matrix::scalar(self.value(a).data().iter().sum());
        let ng = self.ng(a);
        self.push(v, Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Each row divided by `max(||row||, eps)`.
    pub fn row_normalize(&mut self, a: Var, eps: f64) -> Var {
        let m = self.value(a);
        let mut v = m.clone();
        let mut norms = Vec::with_capacity(m.rows());
        for r in 0..m.rows() {
            let n = super::norm(m.row(r)).max(eps);
            for x in v.row_mut(r) {
                *x /= n;
            }
            norms.push(n);
        }
        let ng = self.ng(a);
        self.push(v, Op::RowNormalize(a, eps, norms), ng)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut v = Matrix::zeros(m.rows(), m.cols());
        for r in 0..m.rows() {
            log_softmax_into(m.row(r), v.row_mut(r));
        }
        let ng = self.ng(a);
        self.push(v, Op::LogSoftmaxRows(a), ng)
    }

    /// `(rows, 1)` with entry `r` equal to `a[r, idx[r]]`.
    pub fn pick_cols(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let m = self.value(a);
        assert_eq!(idx.len(), m.rows());
        let v = Matrix::from_vec(m.rows(), 1, idx.iter().enumerate().map(|(r, &c)| m.get(r, c)).collect());
        let ng = self.ng(a);
        self.push(v, Op::PickCols(a, idx), ng)
    }

    /// Reverse pass from a scalar `loss`; returns gradients of every trainable
    /// parameter reached.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));
        let mut out = Gradients::default();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, g, &mut grads, &mut out);
        }
        out
    }

    fn acc(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(m) => m.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Matrix>], v: Var, f: impl FnOnce(&mut Matrix)) {
        if !self.ng(v) {
            return;
        }
        let shape = self.value(v).shape();
        let slot = grads[v.0].get_or_insert_with(|| Matrix::zeros(shape.0, shape.1));
        f(slot);
    }

    fn backprop_node(&self, node: &Node, g: Matrix, grads: &mut [Option<Matrix>], out: &mut Gradients) {
        let val = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Param(key) => out.insert(*key, g),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc_with(grads, *a, |m| gemm(1.0, &g, false, bv, true, 1.0, m));
                self.acc_with(grads, *b, |m| gemm(1.0, av, true, &g, false, 1.0, m));
            }
            Op::MatMulT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc_with(grads, *a, |m| gemm(1.0, &g, false, bv, false, 1.0, m));
                self.acc_with(grads, *b, |m| gemm(1.0, &g, true, av, false, 1.0, m));
            }
            Op::Transpose(a) => self.acc(grads, *a, g.transpose()),
            Op::Add(a, b) => {
                if self.ng(*b) {
                    self.acc(grads, *b, g.clone());
                }
                self.acc(grads, *a, g);
            }
            Op::Sub(a, b) => {
                if self.ng(*b) {
                    self.acc(grads, *b, g.map(|x| -x));
                }
                self.acc(grads, *a, g);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let d = Matrix::from_vec(
                        g.rows(),
                        g.cols(),
                        g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect(),
                    );
                    self.acc(grads, *a, d);
                }
                if self.ng(*b) {
                    let d = Matrix::from_vec(
                        g.rows(),
                        g.cols(),
                        g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect(),
                    );
                    self.acc(grads, *b, d);
                }
            }
            Op::Min(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut da = Matrix::zeros(g.rows(), g.cols());
                let mut db = Matrix::zeros(g.rows(), g.cols());
                for i in 0..g.len() {
                    if av.data()[i] <= bv.data()[i] {
                        da.data_mut()[i] = g.data()[i];
                    } else {
                        db.data_mut()[i] = g.data()[i];
                    }
                }
                self.acc(grads, *a, da);
                self.acc(grads, *b, db);
            }
            Op::AddRow(a, row) => {
                if self.ng(*row) {
                    self.acc(grads, *row, sum_rows(&g));
                }
                self.acc(grads, *a, g);
            }
            Op::MulCol(a, col) => {
                let (av, cv) = (self.value(*a), self.value(*col));
                if self.ng(*col) {
                    let d =
                        Matrix::from_vec(g.rows(), 1, (0..g.rows()).map(|r| super::dot(g.row(r), av.row(r))).collect());
                    self.acc(grads, *col, d);
                }
                if self.ng(*a) {
                    let mut d = g;
                    for r in 0..d.rows() {
                        let s = cv.data()[r];
                        for x in d.row_mut(r) {
                            *x *= s;
                        }
                    }
                    self.acc(grads, *a, d);
                }
            }
            Op::Scale(a, s) => self.acc(grads, *a, g.map(|x| x * s)),
            Op::ScaleBy(a, s) => {
                let (av, k) = (self.value(*a), self.scalar(*s));
                if self.ng(*s) {
                    self.acc(grads, *s, Matrix::scalar(super::dot(g.data(), av.data())));
                }
                self.acc(grads, *a, g.map(|x| x * k));
            }
            Op::AddScalar(a) => self.acc(grads, *a, g),
            Op::Exp(a) => {
                let d = zip_map(&g, val, |gi, y| gi * y);
                self.acc(grads, *a, d);
            }
            Op::Log(a, eps) => {
                let d = zip_map(&g, self.value(*a), |gi, x| if x > *eps { gi / x } else { 0.0 });
                self.acc(grads, *a, d);
            }
            Op::Log1m(a, eps) => {
                let d = zip_map(&g, self.value(*a), |gi, x| if 1.0 - x > *eps { -gi / (1.0 - x) } else { 0.0 });
                self.acc(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = zip_map(&g, val, |gi, y| gi * y * (1.0 - y));
                self.acc(grads, *a, d);
            }
            Op::Relu(a) => {
                let d = zip_map(&g, self.value(*a), |gi, x| if x > 0.0 { gi } else { 0.0 });
                self.acc(grads, *a, d);
            }
            Op::Tanh(a) => {
                let d = zip_map(&g, val, |gi, y| gi * (1.0 - y * y));
                self.acc(grads, *a, d);
            }
            Op::Gelu(a) => {
                let d = zip_map(&g, self.value(*a), |gi, x| gi * gelu_grad(x));
                self.acc(grads, *a, d);
            }
            Op::Square(a) => {
                let d = zip_map(&g, self.value(*a), |gi, x| 2.0 * gi * x);
                self.acc(grads, *a, d);
            }
            Op::Clamp(a, lo, hi) => {
                let d = zip_map(&g, self.value(*a), |gi, x| if x >= *lo && x <= *hi { gi } else { 0.0 });
                self.acc(grads, *a, d);
            }
            Op::LayerNorm { x, gamma, beta, means, rstds } => {
                let xv = self.value(*x);
                let gam = self.value(*gamma).data();
                let n = xv.cols();
                let mut dgamma = Matrix::zeros(1, n);
                let mut dbeta = Matrix::zeros(1, n);
                let mut dx = Matrix::zeros(xv.rows(), n);
                let mut xhat = vec![0.0; n];
                let mut dxhat = vec![0.0; n];
                for r in 0..xv.rows() {
                    let (mean, rstd) = (means[r], rstds[r]);
                    let gr = g.row(r);
                    let xr = xv.row(r);
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for c in 0..n {
                        xhat[c] = (xr[c] - mean) * rstd;
                        dgamma.data_mut()[c] += gr[c] * xhat[c];
                        dbeta.data_mut()[c] += gr[c];
                        dxhat[c] = gr[c] * gam[c];
                        sum_dxhat += dxhat[c];
                        sum_dxhat_xhat += dxhat[c] * xhat[c];
                    }
                    let dr = dx.row_mut(r);
                    let nf = n as f64;
                    for c in 0..n {
                        dr[c] = rstd / nf * (nf * dxhat[c] - sum_dxhat - xhat[c] * sum_dxhat_xhat);
                    }
                }
                self.acc(grads, *gamma, dgamma);
                self.acc(grads, *beta, dbeta);
                self.acc(grads, *x, dx);
            }
            Op::Attention { q, k, v, heads, causal, segs, probs } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let d = qv.cols();
                let hd = d / heads;
                let scale = 1.0 / (hd as f64).sqrt();
                let mut dq = Matrix::zeros(qv.rows(), d);
                let mut dk = Matrix::zeros(kv.rows(), d);
                let mut dv = Matrix::zeros(vv.rows(), d);
                let max_len = segs.iter().map(|s| s.1).max().unwrap_or(0);
                let mut dp = vec![0.0; max_len];
                let mut base = 0;
                for &(start, len) in segs {
                    for h in 0..*heads {
                        let off = h * hd;
                        for i in 0..len {
                            let limit = if *causal { i + 1 } else { len };
                            let go = &g.row(start + i)[off..off + hd];
                            let pr = &probs[base + i * len..base + i * len + limit];
                            let mut dot_i = 0.0;
                            for j in 0..limit {
                                dp[j] = super::dot(go, &vv.row(start + j)[off..off + hd]);
                                dot_i += dp[j] * pr[j];
                            }
                            let qi = &qv.row(start + i)[off..off + hd];
                            for j in 0..limit {
                                let pij = pr[j];
                                let ds = pij * (dp[j] - dot_i) * scale;
                                let dvr = &mut dv.row_mut(start + j)[off..off + hd];
                                for c in 0..hd {
                                    dvr[c] += pij * go[c];
                                }
                                let kr = &kv.row(start + j)[off..off + hd];
                                let dqr = &mut dq.row_mut(start + i)[off..off + hd];
                                for c in 0..hd {
                                    dqr[c] += ds * kr[c];
                                }
                                let dkr = &mut dk.row_mut(start + j)[off..off + hd];
                                for c in 0..hd {
                                    dkr[c] += ds * qi[c];
                                }
                            }
                        }
                        base += len * len;
                    }
                }
                self.acc(grads, *q, dq);
                self.acc(grads, *k, dk);
                self.acc(grads, *v, dv);
            }
            Op::EmbedSum { table, idx, per_row } => {
                self.acc_with(grads, *table, |m| {
                    for r in 0..g.rows() {
                        let gr = g.row(r);
                        for &i in &idx[r * per_row..(r + 1) * per_row] {
                            for (o, x) in m.row_mut(i).iter_mut().zip(gr) {
                                *o += x;
                            }
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let cols = self.value(*p).cols();
                    if self.ng(*p) {
                        let mut d = Matrix::zeros(g.rows(), cols);
                        for r in 0..g.rows() {
                            d.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                        }
                        self.acc(grads, *p, d);
                    }
                    off += cols;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let rows = self.value(*p).rows();
                    if self.ng(*p) {
                        self.acc(grads, *p, g.slice_rows(off, rows));
                    }
                    off += rows;
                }
            }
            Op::SliceRows(a, start) => {
                let start = *start;
                self.acc_with(grads, *a, |m| {
                    for r in 0..g.rows() {
                        for (o, x) in m.row_mut(start + r).iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                });
            }
            Op::SliceCols(a, start) => {
                let start = *start;
                self.acc_with(grads, *a, |m| {
                    for r in 0..g.rows() {
                        let dst = &mut m.row_mut(r)[start..start + g.cols()];
                        for (o, x) in dst.iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                });
            }
            Op::GatherRows(a, idx) => {
                self.acc_with(grads, *a, |m| {
                    for (r, &i) in idx.iter().enumerate() {
                        for (o, x) in m.row_mut(i).iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                });
            }
            Op::MeanRows(a) => {
                let rows = self.value(*a).rows();
                let n = rows as f64;
                let mut d = Matrix::zeros(rows, g.cols());
                for r in 0..rows {
                    for (o, x) in d.row_mut(r).iter_mut().zip(g.data()) {
                        *o = x / n;
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::SumRows(a) => {
                let rows = self.value(*a).rows();
                let mut d = Matrix::zeros(rows, g.cols());
                for r in 0..rows {
                    d.row_mut(r).copy_from_slice(g.data());
                }
                self.acc(grads, *a, d);
            }
            Op::SumCols(a) => {
                let (rows, cols) = self.value(*a).shape();
                let mut d = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    let s = g.data()[r];
                    for x in d.row_mut(r) {
                        *x = s;
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::SumAll(a) => {
                let (rows, cols) = self.value(*a).shape();
                self.acc(grads, *a, Matrix::filled(rows, cols, g.item()));
            }
            Op::RowNormalize(a, _eps, norms) => {
                let av = self.value(*a);
                let mut d = Matrix::zeros(av.rows(), av.cols());
                for r in 0..av.rows() {
                    let y = val.row(r);
                    let gr = g.row(r);
                    let n = norms[r];
                    let raw = super::norm(av.row(r));
                    let dr = d.row_mut(r);
                    if raw >= n {
                        let yg = super::dot(y, gr);
                        for c in 0..dr.len() {
                            dr[c] = (gr[c] - y[c] * yg) / n;
                        }
                    } else {
                        for c in 0..dr.len() {
                            dr[c] = gr[c] / n;
                        }
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::LogSoftmaxRows(a) => {
                let mut d = g.clone();
                for r in 0..d.rows() {
                    let s: f64 = g.row(r).iter().sum();
                    let y = val.row(r);
                    for (o, yi) in d.row_mut(r).iter_mut().zip(y) {
                        *o -= yi.exp() * s;
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::PickCols(a, idx) => {
                self.acc_with(grads, *a, |m| {
                    for (r, &c) in idx.iter().enumerate() {
                        let v = m.get(r, c) + g.data()[r];
                        m.set(r, c, v);
                    }
                });
            }
        }
    }
}

fn zip_map(g: &Matrix, x: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    Matrix::from_vec(g.rows(), g.cols(), g.data().iter().zip(x.data()).map(|(&a, &b)| f(a, b)).collect())
}
