//! Dense row-major matrices and a small reverse-mode autodiff tape.
//!
//! Everything is `f64`. Each row of a matrix product is computed with the same
//! kernel and the same reduction order regardless of how many rows are in the
//! batch, which is what makes prefix/full-sequence encodings agree exactly.

mod graph;
mod optim;
mod params;

pub use graph::{Gradients, Graph, Var};
pub use optim::{Adam, AdamConfig, AdamState};
pub use params::{ParamKey, ParamStore};

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length mismatch");
        Self { rows, cols, data }
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        let cols = data.len();
        Self::from_vec(1, cols, data)
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_vec(1, 1, vec![value])
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar {:?}", self.shape());
        self.data[0]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn push_row(&mut self, row: &[f64]) {
        assert!(self.rows == 0 || row.len() == self.cols, "push_row width mismatch");
        self.cols = row.len();
        self.data.extend_from_slice(row);
        self.rows += 1;
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Matrix {
        assert!(start + len <= self.rows);
        Matrix::from_vec(len, self.cols, self.data[start * self.cols..(start + len) * self.cols].to_vec())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix::from_vec(self.rows, self.cols, self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` where `op` optionally transposes.
pub fn gemm(alpha: f64, a: &Matrix, trans_a: bool, b: &Matrix, trans_b: bool, beta: f64, c: &mut Matrix) {
    let (m, k) = if trans_a { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (kb, n) = if trans_b { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, kb, "gemm inner dimension mismatch");
    assert_eq!(c.shape(), (m, n), "gemm output shape mismatch");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for x in c.data.iter_mut() {
            *x *= beta;
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if trans_b { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    // SAFETY: shapes and strides are checked above and all buffers are live for the call.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    let mut c = Matrix::zeros(a.rows, b.cols);
    gemm(1.0, a, false, b, false, 0.0, &mut c);
    c
}

/// `a * b^T`
pub fn matmul_t(a: &Matrix, b: &Matrix) -> Matrix {
    let mut c = Matrix::zeros(a.rows, b.rows);
    gemm(1.0, a, false, b, true, 0.0, &mut c);
    c
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
pub fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Numerically stable softmax of a slice.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_softmax_into(xs: &[f64], out: &mut [f64]) {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for &x in xs {
        sum += (x - max).exp();
    }
    let lse = max + sum.ln();
    for (o, &x) in out.iter_mut().zip(xs) {
        *o = x - lse;
    }
}

/// Row-wise layer normalisation; returns (output, per-row mean, per-row 1/std).
pub fn layer_norm_forward(x: &Matrix, gamma: &[f64], beta: &[f64], eps: f64) -> (Matrix, Vec<f64>, Vec<f64>) {
    let n = x.cols;
    let mut out = Matrix::zeros(x.rows, n);
    let mut means = Vec::with_capacity(x.rows);
    let mut rstds = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        let o = out.row_mut(r);
        for c in 0..n {
            o[c] = (row[c] - mean) * rstd * gamma[c] + beta[c];
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (out, means, rstds)
}

/// Multi-head scaled dot-product self-attention over packed sequences.
///
/// `q`, `k`, `v` are `(rows, d)` with heads laid out as contiguous column
/// blocks; `segs` lists `(start, len)` row ranges that attend only within
/// themselves. When `causal`, row `t` of a segment sees keys `0..=t`. Returns
/// the output and the attention probabilities, stored per segment then per
/// head as `len x len` blocks (zero above the diagonal when causal).
pub fn attention_forward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    heads: usize,
    causal: bool,
    segs: &[(usize, usize)],
) -> (Matrix, Vec<f64>) {
    let d = q.cols;
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = Matrix::zeros(q.rows, d);
    let max_len = segs.iter().map(|s| s.1).max().unwrap_or(0);
    let mut probs = Vec::with_capacity(segs.iter().map(|s| s.1 * s.1 * heads).sum());
    let mut scores = vec![0.0; max_len];
    for &(start, len) in segs {
        let ks = k.slice_rows(start, len);
        let vs = v.slice_rows(start, len);
        for h in 0..heads {
            let off = h * hd;
            for i in 0..len {
                let limit = if causal { i + 1 } else { len };
                attend_row(
                    &q.row(start + i)[off..off + hd],
                    &ks,
                    &vs,
                    off,
                    hd,
                    limit,
                    scale,
                    &mut scores,
                    &mut out.row_mut(start + i)[off..off + hd],
                );
                probs.extend_from_slice(&scores[..limit]);
                probs.extend(std::iter::repeat_n(0.0, len - limit));
            }
        }
    }
    (out, probs)
}

/// One query row of one head against keys `0..limit`. Leaves the attention
/// probabilities in `scores[..limit]` and writes the weighted values to `out`.
#[allow(clippy::too_many_arguments)]
#[inline]
pub fn attend_row(
    q: &[f64],
    k: &Matrix,
    v: &Matrix,
    off: usize,
    hd: usize,
    limit: usize,
    scale: f64,
    scores: &mut [f64],
    out: &mut [f64],
) {
    let mut max = f64::NEG_INFINITY;
    for j in 0..limit {
        let s = dot(q, &k.row(j)[off..off + hd]) * scale;
        scores[j] = s;
        if s > max {
            max = s;
        }
    }
    let mut sum = 0.0;
    for s in scores[..limit].iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    for s in scores[..limit].iter_mut() {
        *s /= sum;
    }
    for o in out.iter_mut() {
        *o = 0.0;
    }
    for j in 0..limit {
        let w = scores[j];
        let vr = &v.row(j)[off..off + hd];
        for c in 0..hd {
            out[c] += w * vr[c];
        }
    }
}
