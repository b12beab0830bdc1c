//! Dense row-major matrices and a reverse-mode tape over them.
//!
//! A [`Tape`] is built per sample: leaves are inputs, frozen constants or
//! trainable parameters (tagged with their index in a parameter store), and
//! every operation records its inputs. [`Tape::backward`] returns gradients
//! keyed by parameter index, summed over every leaf bound to that index.

use std::sync::Arc;

#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "shape {rows}x{cols} vs {} values", data.len());
        Mat { rows, cols, data }
    }

    pub fn from_f32(rows: usize, cols: usize, data: &[f32]) -> Self {
        Mat::from_vec(rows, cols, data.iter().map(|&v| v as f64).collect())
    }

    pub fn row_vec(data: Vec<f64>) -> Self {
        let n = data.len();
        Mat::from_vec(1, n, data)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul {:?} x {:?}", self.shape(), other.shape());
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.cols, "matmul_t {:?} x {:?}ᵀ", self.shape(), other.shape());
        let mut out = Mat::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        out
    }

    /// `selfᵀ · other`
    pub fn t_matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.rows, other.rows, "t_matmul {:?}ᵀ x {:?}", self.shape(), other.shape());
        let mut out = Mat::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let arow = self.row(k);
            let brow = other.row(k);
            for (i, &a) in arow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var },
    Softmax(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    CrossEntropy { logits: Var, label: usize },
    SqErrSum { pred: Var, target: Mat },
    SumAll(Var),
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

/// Row mask for masked softmax: `allowed[r * cols + c]`.
pub type AttnMask = Arc<Vec<bool>>;

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(Var, usize)>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "not a scalar");
        m.data[0]
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable leaf bound to parameter `index` of the caller's store.
    pub fn param(&mut self, value: Mat, index: usize) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.params.push((v, index));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_t(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMulT(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let mut value = va.clone();
        value.add_assign(vb);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    /// Adds a `1 × cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!(vr.rows, 1, "add_row expects a single row");
        assert_eq!(va.cols, vr.cols, "add_row width mismatch");
        let mut value = va.clone();
        for r in 0..value.rows {
            for (x, b) in value.row_mut(r).iter_mut().zip(&vr.data) {
                *x += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::AddRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let mut value = self.value(a).clone();
        value.data.iter_mut().for_each(|x| *x *= k);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, k), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for x in value.data.iter_mut() {
            let u = GELU_C * (*x + 0.044715 * *x * *x * *x);
            *x = 0.5 * *x * (1.0 + u.tanh());
        }
        let rg = self.rg(a);
        self.push(value, Op::Gelu(a), rg)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (each `1 × cols`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let vx = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        assert_eq!(g.shape(), (1, vx.cols));
        assert_eq!(b.shape(), (1, vx.cols));
        let mut value = Mat::zeros(vx.rows, vx.cols);
        for r in 0..vx.rows {
            let (mean, inv) = row_stats(vx.row(r));
            let out = value.row_mut(r);
            for (c, o) in out.iter_mut().enumerate() {
                *o = (vx.get(r, c) - mean) * inv * g.data[c] + b.data[c];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(value, Op::LayerNorm { x, gamma, beta }, rg)
    }

    /// Row-wise softmax. Entries where `mask` is false get probability 0;
    /// every row must allow at least one entry.
    pub fn softmax(&mut self, a: Var, mask: Option<&AttnMask>) -> Var {
        let va = self.value(a);
        let mut value = Mat::zeros(va.rows, va.cols);
        for r in 0..va.rows {
            let allowed = |c: usize| mask.map_or(true, |m| m[r * va.cols + c]);
            let mut max = f64::NEG_INFINITY;
            for c in 0..va.cols {
                if allowed(c) {
                    max = max.max(va.get(r, c));
                }
            }
            assert!(max > f64::NEG_INFINITY, "softmax row {r} fully masked");
            let mut sum = 0.0;
            for c in 0..va.cols {
                if allowed(c) {
                    let e = (va.get(r, c) - max).exp();
                    value.data[r * va.cols + c] = e;
                    sum += e;
                }
            }
            value.row_mut(r).iter_mut().for_each(|x| *x /= sum);
        }
        let rg = self.rg(a);
        self.push(value, Op::Softmax(a), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let va = self.value(a);
        assert!(start + len <= va.rows, "slice_rows out of range");
        let value = Mat::from_vec(len, va.cols, va.data[start * va.cols..(start + len) * va.cols].to_vec());
        let rg = self.rg(a);
        self.push(value, Op::SliceRows(a, start), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let va = self.value(a);
        assert!(start + len <= va.cols, "slice_cols out of range");
        let mut value = Mat::zeros(va.rows, len);
        for r in 0..va.rows {
            value.row_mut(r).copy_from_slice(&va.row(r)[start..start + len]);
        }
        let rg = self.rg(a);
        self.push(value, Op::SliceCols(a, start), rg)
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let va = self.value(a);
        let mut data = Vec::with_capacity(rows.len() * va.cols);
        for &r in rows {
            data.extend_from_slice(va.row(r));
        }
        let value = Mat::from_vec(rows.len(), va.cols, data);
        let rg = self.rg(a);
        self.push(value, Op::SelectRows(a, rows.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols, cols, "concat_rows width mismatch");
            data.extend_from_slice(&v.data);
            rows += v.rows;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut value = Mat::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows, rows, "concat_cols height mismatch");
            for r in 0..rows {
                value.row_mut(r)[offset..offset + v.cols].copy_from_slice(v.row(r));
            }
            offset += v.cols;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Softmax cross-entropy of a `1 × K` logit row against `label`.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Var {
        let v = self.value(logits);
        assert_eq!(v.rows, 1, "cross_entropy expects one row");
        assert!(label < v.cols, "label {label} out of range for {} classes", v.cols);
        let loss = log_sum_exp(&v.data) - v.data[label];
        let rg = self.rg(logits);
        self.push(Mat::from_vec(1, 1, vec![loss]), Op::CrossEntropy { logits, label }, rg)
    }

    /// `Σ (pred − target)²` over every entry.
    pub fn sq_err_sum(&mut self, pred: Var, target: Mat) -> Var {
        let v = self.value(pred);
        assert_eq!(v.shape(), target.shape(), "sq_err_sum shape mismatch");
        let s = v.data.iter().zip(&target.data).map(|(a, b)| (a - b) * (a - b)).sum();
        let rg = self.rg(pred);
        self.push(Mat::from_vec(1, 1, vec![s]), Op::SqErrSum { pred, target }, rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let rg = self.rg(a);
        self.push(Mat::from_vec(1, 1, vec![s]), Op::SumAll(a), rg)
    }

    /// Sum of a non-empty list of same-shaped nodes.
    pub fn sum(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        parts[1..].iter().fold(parts[0], |acc, &p| self.add(acc, p))
    }

    /// Reverse pass from the scalar `loss`. Returns one optional gradient per
    /// parameter index in `0..n_params`.
    pub fn backward(&self, loss: Var, n_params: usize) -> Vec<Option<Mat>> {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward from non-scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::from_vec(1, 1, vec![1.0]));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut out: Vec<Option<Mat>> = (0..n_params).map(|_| None).collect();
        for &(v, idx) in &self.params {
            if let Some(g) = &grads[v.0] {
                match &mut out[idx] {
                    Some(acc) => acc.add_assign(g),
                    slot @ None => *slot = Some(g.clone()),
                }
            }
        }
        out
    }

    fn propagate(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        let mut acc = |v: Var, d: Mat| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&d),
                slot @ None => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    acc(*a, g.matmul_t(vb));
                }
                if self.rg(*b) {
                    acc(*b, va.t_matmul(g));
                }
            }
            Op::MatMulT(a, b) => {
                // y = a bᵀ: da = g b, db = gᵀ a
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    acc(*a, g.matmul(vb));
                }
                if self.rg(*b) {
                    acc(*b, g.t_matmul(va));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                if self.rg(*row) {
                    let mut d = Mat::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (x, y) in d.data.iter_mut().zip(g.row(r)) {
                            *x += y;
                        }
                    }
                    acc(*row, d);
                }
            }
            Op::Scale(a, k) => {
                let mut d = g.clone();
                d.data.iter_mut().for_each(|x| *x *= k);
                acc(*a, d);
            }
            Op::Gelu(a) => {
                let va = self.value(*a);
                let mut d = g.clone();
                for (dx, &x) in d.data.iter_mut().zip(&va.data) {
                    let u = GELU_C * (x + 0.044715 * x * x * x);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                    *dx *= 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
                }
                acc(*a, d);
            }
            Op::LayerNorm { x, gamma, beta } => {
                let vx = self.value(*x);
                let gam = self.value(*gamma);
                let n = vx.cols as f64;
                let mut dx = Mat::zeros(vx.rows, vx.cols);
                let mut dg = Mat::zeros(1, vx.cols);
                let mut db = Mat::zeros(1, vx.cols);
                for r in 0..vx.rows {
                    let (mean, inv) = row_stats(vx.row(r));
                    let xhat: Vec<f64> = vx.row(r).iter().map(|v| (v - mean) * inv).collect();
                    let gr = g.row(r);
                    let dxhat: Vec<f64> = gr.iter().zip(&gam.data).map(|(a, b)| a * b).collect();
                    let m1 = dxhat.iter().sum::<f64>() / n;
                    let m2 = dot(&dxhat, &xhat) / n;
                    for c in 0..vx.cols {
                        dx.data[r * vx.cols + c] = inv * (dxhat[c] - m1 - xhat[c] * m2);
                        dg.data[c] += gr[c] * xhat[c];
                        db.data[c] += gr[c];
                    }
                }
                acc(*x, dx);
                acc(*gamma, dg);
                acc(*beta, db);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let mut d = Mat::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let s = dot(g.row(r), y.row(r));
                    for c in 0..y.cols {
                        d.data[r * y.cols + c] = y.get(r, c) * (g.get(r, c) - s);
                    }
                }
                acc(*a, d);
            }
            Op::SliceRows(a, start) => {
                let va = self.value(*a);
                let mut d = Mat::zeros(va.rows, va.cols);
                d.data[start * va.cols..(start + g.rows) * va.cols].copy_from_slice(&g.data);
                acc(*a, d);
            }
            Op::SliceCols(a, start) => {
                let va = self.value(*a);
                let mut d = Mat::zeros(va.rows, va.cols);
                for r in 0..va.rows {
                    d.row_mut(r)[*start..start + g.cols].copy_from_slice(g.row(r));
                }
                acc(*a, d);
            }
            Op::SelectRows(a, rows) => {
                let va = self.value(*a);
                let mut d = Mat::zeros(va.rows, va.cols);
                for (i, &r) in rows.iter().enumerate() {
                    for (x, y) in d.row_mut(r).iter_mut().zip(g.row(i)) {
                        *x += y;
                    }
                }
                acc(*a, d);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = self.value(p).rows;
                    let d = Mat::from_vec(rows, g.cols, g.data[offset * g.cols..(offset + rows) * g.cols].to_vec());
                    acc(p, d);
                    offset += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = self.value(p).cols;
                    let mut d = Mat::zeros(g.rows, cols);
                    for r in 0..g.rows {
                        d.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + cols]);
                    }
                    acc(p, d);
                    offset += cols;
                }
            }
            Op::CrossEntropy { logits, label } => {
                let v = self.value(*logits);
                let p = softmax_vec(&v.data);
                let mut d = Mat::row_vec(p);
                d.data[*label] -= 1.0;
                d.data.iter_mut().for_each(|x| *x *= g.data[0]);
                acc(*logits, d);
            }
            Op::SqErrSum { pred, target } => {
                let v = self.value(*pred);
                let mut d = v.clone();
                for (x, t) in d.data.iter_mut().zip(&target.data) {
                    *x = 2.0 * (*x - t) * g.data[0];
                }
                acc(*pred, d);
            }
            Op::SumAll(a) => {
                let va = self.value(*a);
                acc(*a, Mat::from_vec(va.rows, va.cols, vec![g.data[0]; va.rows * va.cols]));
            }
        }
    }
}

fn row_stats(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LN_EPS).sqrt())
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn softmax_vec(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|x| (x - lse).exp()).collect()
}
