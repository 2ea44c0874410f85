use std::rc::Rc;

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{MpcError, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Gather(Var, Rc<[usize]>),
    SliceCols(Var, usize),
    Reshape(Var),
    MaskedSoftmax(Var),
    MaskedLogSoftmax(Var, Rc<[bool]>, Vec<f64>),
    Sigmoid(Var),
    Gelu(Var),
    Relu(Var),
    LayerNorm { x: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Dropout(Var, Vec<f64>),
    CrossEntropy { logits: Var, targets: Rc<[usize]>, probs: Vec<f64> },
    BceWithLogits(Var, Rc<[f64]>),
    Pick(Var, Rc<[usize]>),
    Sum(Var),
    Mean(Var),
    SumLastAxis(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

const LN_EPS: f64 = 1e-12;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Reverse-mode tape. Nodes are appended in evaluation order, which is a
/// topological order by construction, so backward is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    training: bool,
}

/// Gradients of one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// dLoss/dVar. Tensors that never reached the loss get exact zeros.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(MpcError::shape(op, format!("expected a matrix, got {:?}", s))),
    }
}

// c[m×n] += a[m×k] · b[k×n]
fn mm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        let mut p = 0;
        // Four rank-1 updates per pass over the output row.
        while p + 4 <= k {
            let (a0, a1, a2, a3) = (arow[p], arow[p + 1], arow[p + 2], arow[p + 3]);
            let b0 = &b[p * n..(p + 1) * n];
            let b1 = &b[(p + 1) * n..(p + 2) * n];
            let b2 = &b[(p + 2) * n..(p + 3) * n];
            let b3 = &b[(p + 3) * n..(p + 4) * n];
            for j in 0..n {
                crow[j] += (a0 * b0[j] + a1 * b1[j]) + (a2 * b2[j] + a3 * b3[j]);
            }
            p += 4;
        }
        for p in p..k {
            let av = arow[p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

// Four independent partial sums so the loop vectorizes.
fn dot(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (xc, yc) = (x.chunks_exact(4), y.chunks_exact(4));
    let tail: f64 = xc.remainder().iter().zip(yc.remainder()).map(|(a, b)| a * b).sum();
    for (a, b) in xc.zip(yc) {
        for l in 0..4 {
            acc[l] += a[l] * b[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

// c[m×n] += a[m×k] · b[n×k]ᵀ
fn mm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

// c[m×n] += a[k×m]ᵀ · b[k×n]
fn mm_tn(a: &[f64], b: &[f64], c: &mut [f64], k: usize, m: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let mut p = 0;
        while p + 4 <= k {
            let (a0, a1, a2, a3) = (a[p * m + i], a[(p + 1) * m + i], a[(p + 2) * m + i], a[(p + 3) * m + i]);
            let b0 = &b[p * n..(p + 1) * n];
            let b1 = &b[(p + 1) * n..(p + 2) * n];
            let b2 = &b[(p + 2) * n..(p + 3) * n];
            let b3 = &b[(p + 3) * n..(p + 4) * n];
            for j in 0..n {
                crow[j] += (a0 * b0[j] + a1 * b1[j]) + (a2 * b2[j] + a3 * b3[j]);
            }
            p += 4;
        }
        for p in p..k {
            let av = a[p * m + i];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    /// A graph that applies dropout.
    pub fn training() -> Self {
        Graph {
            nodes: Vec::new(),
            training: true,
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
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

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf without gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a), "matmul")?;
        let (k2, n) = dims2(self.value(b), "matmul")?;
        if k != k2 {
            return Err(MpcError::shape("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![0.0; m * n];
        mm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a), "matmul_nt")?;
        let (n, k2) = dims2(self.value(b), "matmul_nt")?;
        if k != k2 {
            return Err(MpcError::shape("matmul_nt", format!("[{m},{k}] x [{n},{k2}]^T")));
        }
        let mut out = vec![0.0; m * n];
        mm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNT(a, b), rg))
    }

    fn zip_same(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(MpcError::shape(op, format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    fn row_broadcast(&self, x: Var, r: Var, op: &'static str) -> Result<usize> {
        let cols = self.value(x).cols();
        let rt = self.value(r);
        if rt.shape().len() != 1 || rt.numel() != cols || self.value(x).shape().is_empty() {
            return Err(MpcError::shape(
                op,
                format!("{:?} with row {:?}", self.value(x).shape(), rt.shape()),
            ));
        }
        Ok(cols)
    }

    /// `x + b` with `b` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let cols = self.row_broadcast(x, b, "add_row")?;
        let bias = self.value(b).data();
        let xt = self.value(x);
        let data = xt
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bias[i % cols])
            .collect();
        let t = Tensor::new(xt.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(t, Op::AddRow(x, b), rg))
    }

    /// `x ⊙ g` with `g` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var> {
        let cols = self.row_broadcast(x, g, "mul_row")?;
        let gain = self.value(g).data();
        let xt = self.value(x);
        let data = xt
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * gain[i % cols])
            .collect();
        let t = Tensor::new(xt.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(g);
        Ok(self.push(t, Op::MulRow(x, g), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let xt = self.value(x);
        let t = Tensor::new(xt.shape().to_vec(), xt.data().iter().map(|v| v * c).collect())
            .expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let xt = self.value(x);
        let t = Tensor::new(xt.shape().to_vec(), xt.data().iter().map(|v| v + c).collect())
            .expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::AddScalar(x), rg)
    }

    /// Concatenate along the last axis. All inputs need the same row count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(MpcError::shape("concat", "no inputs"));
        }
        let rows = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows || t.shape().len() > 2 {
                return Err(MpcError::shape("concat", format!("row count {} vs {:?}", rows, t.shape())));
            }
            total += t.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let shape = if self.value(parts[0]).shape().len() <= 1 {
            vec![total]
        } else {
            vec![rows, total]
        };
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(shape, data)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Stack along the first axis. All inputs need the same column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(MpcError::shape("concat_rows", "no inputs"));
        }
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols || t.shape().len() > 2 {
                return Err(MpcError::shape("concat_rows", format!("cols {} vs {:?}", cols, t.shape())));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(vec![rows, cols], data)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Row gather; with a table as `x` this is an embedding lookup.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (n, d) = dims2(self.value(x), "gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(MpcError::shape("gather_rows", format!("row {bad} out of range for {n} rows")));
        }
        let xt = self.value(x);
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(xt.row(i));
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![idx.len(), d], data)?,
            Op::Gather(x, idx.into()),
            rg,
        ))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = dims2(self.value(x), "slice_cols")?;
        if start + len > n {
            return Err(MpcError::shape("slice_cols", format!("{start}+{len} > {n}")));
        }
        let xt = self.value(x);
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&xt.row(r)[start..start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![m, len], data)?, Op::SliceCols(x, start), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), self.value(x).data().to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    fn check_mask(&self, x: Var, mask: &[bool], op: &'static str) -> Result<usize> {
        let xt = self.value(x);
        if mask.len() != xt.numel() {
            return Err(MpcError::shape(op, format!("mask length {} vs {}", mask.len(), xt.numel())));
        }
        let cols = xt.cols();
        for (r, row) in mask.chunks(cols).enumerate() {
            if !row.iter().any(|&m| m) {
                return Err(MpcError::invalid(format!("{op}: row {r} has no active position")));
            }
        }
        Ok(cols)
    }

    /// Softmax over the last axis restricted to `mask`; inactive entries are
    /// exactly zero.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let cols = self.check_mask(x, mask, "masked_softmax")?;
        let xt = self.value(x);
        let mut out = vec![0.0; xt.numel()];
        for (r, chunk) in out.chunks_mut(cols).enumerate() {
            let row = xt.row(r);
            let m = &mask[r * cols..(r + 1) * cols];
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &a)| a)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for ((o, v), &a) in chunk.iter_mut().zip(row).zip(m) {
                if a {
                    *o = (v - max).exp();
                    z += *o;
                }
            }
            for o in chunk.iter_mut() {
                *o /= z;
            }
        }
        let t = Tensor::new(xt.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::MaskedSoftmax(x), rg))
    }

    /// Log-softmax over the last axis restricted to `mask`; inactive entries
    /// are set to zero and carry no gradient.
    pub fn masked_log_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let cols = self.check_mask(x, mask, "masked_log_softmax")?;
        let xt = self.value(x);
        let mut out = vec![0.0; xt.numel()];
        let mut probs = vec![0.0; xt.numel()];
        for r in 0..xt.rows() {
            let row = xt.row(r);
            let m = &mask[r * cols..(r + 1) * cols];
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &a)| a)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row
                .iter()
                .zip(m)
                .filter(|(_, &a)| a)
                .map(|(v, _)| (v - max).exp())
                .sum();
            let lz = max + z.ln();
            for c in 0..cols {
                if m[c] {
                    out[r * cols + c] = row[c] - lz;
                    probs[r * cols + c] = (row[c] - lz).exp();
                }
            }
        }
        let t = Tensor::new(xt.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::MaskedLogSoftmax(x, mask.into(), probs), rg))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let xt = self.value(x);
        Tensor::new(xt.shape().to_vec(), xt.data().iter().map(|v| f(*v)).collect()).expect("same shape")
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.map(x, sigmoid);
        let rg = self.rg(x);
        self.push(t, Op::Sigmoid(x), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.map(x, gelu);
        let rg = self.rg(x);
        self.push(t, Op::Gelu(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.map(x, |v| v.max(0.0));
        let rg = self.rg(x);
        self.push(t, Op::Relu(x), rg)
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let cols = xt.cols();
        let rows = xt.numel() / cols;
        let mut xhat = vec![0.0; xt.numel()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xt.data()[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let s = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = s;
            for c in 0..cols {
                xhat[r * cols + c] = (row[c] - mean) * s;
            }
        }
        let t = Tensor::new(xt.shape().to_vec(), xhat.clone()).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::LayerNorm { x, xhat, rstd }, rg)
    }

    /// Inverted dropout; the identity outside training graphs or at `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if !self.training || p <= 0.0 {
            return x;
        }
        let keep = 1.0 - p;
        let n = self.value(x).numel();
        let scale: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let xt = self.value(x);
        let data = xt.data().iter().zip(&scale).map(|(v, s)| v * s).collect();
        let t = Tensor::new(xt.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Dropout(x, scale), rg)
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits` ([n, V]).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, v) = dims2(self.value(logits), "cross_entropy")?;
        if targets.len() != n || n == 0 {
            return Err(MpcError::shape("cross_entropy", format!("{} targets for {} rows", targets.len(), n)));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(MpcError::shape("cross_entropy", format!("target {bad} >= {v}")));
        }
        let lt = self.value(logits);
        let mut probs = vec![0.0; n * v];
        let mut loss = 0.0;
        for r in 0..n {
            let row = lt.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lz = max + z.ln();
            for c in 0..v {
                probs[r * v + c] = (row[c] - lz).exp();
            }
            loss -= row[targets[r]] - lz;
        }
        let t = Tensor::scalar(loss / n as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            t,
            Op::CrossEntropy {
                logits,
                targets: targets.into(),
                probs,
            },
            rg,
        ))
    }

    /// Element-wise binary cross-entropy on logits.
    pub fn bce_with_logits(&mut self, z: Var, labels: &[f64]) -> Result<Var> {
        let zt = self.value(z);
        if zt.numel() != labels.len() {
            return Err(MpcError::shape("bce_with_logits", format!("{} labels for {} logits", labels.len(), zt.numel())));
        }
        let data = zt
            .data()
            .iter()
            .zip(labels)
            .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
            .collect();
        let t = Tensor::new(zt.shape().to_vec(), data)?;
        let rg = self.rg(z);
        Ok(self.push(t, Op::BceWithLogits(z, labels.into()), rg))
    }

    /// Selects flat elements into a vector.
    pub fn pick(&mut self, x: Var, flat: &[usize]) -> Result<Var> {
        let xt = self.value(x);
        if let Some(&bad) = flat.iter().find(|&&i| i >= xt.numel()) {
            return Err(MpcError::shape("pick", format!("index {bad} >= {}", xt.numel())));
        }
        let data = flat.iter().map(|&i| xt.data()[i]).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::vector(data), Op::Pick(x, flat.into()), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let s = xt.data().iter().sum::<f64>() / xt.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Row sums: [.., n] → [..].
    pub fn sum_last_axis(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let cols = xt.cols();
        let data: Vec<f64> = xt.data().chunks(cols).map(|c| c.iter().sum()).collect();
        let rg = self.rg(x);
        self.push(Tensor::vector(data), Op::SumLastAxis(x), rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(MpcError::shape("backward", format!("loss has shape {:?}", self.shape(loss))));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[id].take() else { continue };
            self.backprop_node(node, &gy, &mut grads);
        }
        // Leaves that require grad but were not reached get zeros.
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[i].is_none() {
                grads[i] = Some(vec![0.0; node.value.numel()]);
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn backprop_node(&self, node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        // Returns the accumulator for `v`, or None if `v` takes no gradient.
        fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
            if !nodes[v.0].requires_grad {
                return None;
            }
            let n = nodes[v.0].value.numel();
            Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
        }
        let val = |v: Var| nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                let n = nodes[b.0].value.shape()[1];
                if let Some(ga) = slot(nodes, grads, *a) {
                    mm_nt(gy, val(*b), ga, m, n, k);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    mm_tn(val(*a), gy, gb, m, k, n);
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                let n = nodes[b.0].value.shape()[0];
                if let Some(ga) = slot(nodes, grads, *a) {
                    mm_nn(gy, val(*b), ga, m, n, k);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    mm_tn(gy, val(*a), gb, m, n, k);
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().zip(gy).for_each(|(g, d)| *g += d);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    gb.iter_mut().zip(gy).for_each(|(g, d)| *g += d);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().zip(gy).for_each(|(g, d)| *g += d);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    gb.iter_mut().zip(gy).for_each(|(g, d)| *g -= d);
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((g, d), y) in ga.iter_mut().zip(gy).zip(val(*b)) {
                        *g += d * y;
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for ((g, d), x) in gb.iter_mut().zip(gy).zip(val(*a)) {
                        *g += d * x;
                    }
                }
            }
            Op::AddRow(x, b) => {
                let cols = nodes[b.0].value.numel();
                if let Some(gx) = slot(nodes, grads, *x) {
                    gx.iter_mut().zip(gy).for_each(|(g, d)| *g += d);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for (i, d) in gy.iter().enumerate() {
                        gb[i % cols] += d;
                    }
                }
            }
            Op::MulRow(x, w) => {
                let cols = nodes[w.0].value.numel();
                let wv = val(*w);
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (i, (g, d)) in gx.iter_mut().zip(gy).enumerate() {
                        *g += d * wv[i % cols];
                    }
                }
                let xv = val(*x);
                if let Some(gw) = slot(nodes, grads, *w) {
                    for (i, d) in gy.iter().enumerate() {
                        gw[i % cols] += d * xv[i];
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    gx.iter_mut().zip(gy).for_each(|(g, d)| *g += c * d);
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    gx.iter_mut().zip(gy).for_each(|(g, d)| *g += d);
                }
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for p in parts {
                    let c = nodes[p.0].value.cols();
                    if let Some(gp) = slot(nodes, grads, *p) {
                        for r in 0..rows {
                            for j in 0..c {
                                gp[r * c + j] += gy[r * total + offset + j];
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = nodes[p.0].value.numel();
                    if let Some(gp) = slot(nodes, grads, *p) {
                        gp.iter_mut().zip(&gy[offset..offset + n]).for_each(|(g, d)| *g += d);
                    }
                    offset += n;
                }
            }
            Op::Gather(x, idx) => {
                let d = nodes[x.0].value.cols();
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..d {
                            gx[i * d + j] += gy[r * d + j];
                        }
                    }
                }
            }
            Op::SliceCols(x, start) => {
                let n = nodes[x.0].value.cols();
                let len = node.value.cols();
                if let Some(gx) = slot(nodes, grads, *x) {
                    for r in 0..node.value.rows() {
                        for j in 0..len {
                            gx[r * n + start + j] += gy[r * len + j];
                        }
                    }
                }
            }
            Op::MaskedSoftmax(x) => {
                let cols = node.value.cols();
                let y = node.value.data();
                if let Some(gx) = slot(nodes, grads, *x) {
                    for r in 0..node.value.rows() {
                        let ys = &y[r * cols..(r + 1) * cols];
                        let gs = &gy[r * cols..(r + 1) * cols];
                        let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            gx[r * cols + c] += ys[c] * (gs[c] - dot);
                        }
                    }
                }
            }
            Op::MaskedLogSoftmax(x, mask, probs) => {
                let cols = node.value.cols();
                if let Some(gx) = slot(nodes, grads, *x) {
                    for r in 0..node.value.rows() {
                        let m = &mask[r * cols..(r + 1) * cols];
                        let gs = &gy[r * cols..(r + 1) * cols];
                        let total: f64 = gs.iter().zip(m).filter(|(_, &a)| a).map(|(g, _)| g).sum();
                        for c in 0..cols {
                            if m[c] {
                                gx[r * cols + c] += gs[c] - probs[r * cols + c] * total;
                            }
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    for ((g, d), y) in gx.iter_mut().zip(gy).zip(node.value.data()) {
                        *g += d * y * (1.0 - y);
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = val(*x);
                if let Some(gx) = slot(nodes, grads, *x) {
                    for ((g, d), xi) in gx.iter_mut().zip(gy).zip(xv) {
                        *g += d * gelu_grad(*xi);
                    }
                }
            }
            Op::Relu(x) => {
                let xv = val(*x);
                if let Some(gx) = slot(nodes, grads, *x) {
                    for ((g, d), xi) in gx.iter_mut().zip(gy).zip(xv) {
                        // subgradient 0 at the kink
                        if *xi > 0.0 {
                            *g += d;
                        }
                    }
                }
            }
            Op::LayerNorm { x, xhat, rstd } => {
                let cols = node.value.cols();
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (r, s) in rstd.iter().enumerate() {
                        let xs = &xhat[r * cols..(r + 1) * cols];
                        let gs = &gy[r * cols..(r + 1) * cols];
                        let mg = gs.iter().sum::<f64>() / cols as f64;
                        let mgx = gs.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        for c in 0..cols {
                            gx[r * cols + c] += s * (gs[c] - mg - xs[c] * mgx);
                        }
                    }
                }
            }
            Op::Dropout(x, scale) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    for ((g, d), s) in gx.iter_mut().zip(gy).zip(scale) {
                        *g += d * s;
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let v = nodes[logits.0].value.cols();
                let n = targets.len() as f64;
                if let Some(gl) = slot(nodes, grads, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        for c in 0..v {
                            let onehot = if c == t { 1.0 } else { 0.0 };
                            gl[r * v + c] += gy[0] * (probs[r * v + c] - onehot) / n;
                        }
                    }
                }
            }
            Op::BceWithLogits(z, labels) => {
                let zv = val(*z);
                if let Some(gz) = slot(nodes, grads, *z) {
                    for i in 0..zv.len() {
                        gz[i] += gy[i] * (sigmoid(zv[i]) - labels[i]);
                    }
                }
            }
            Op::Pick(x, flat) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (k, &i) in flat.iter().enumerate() {
                        gx[i] += gy[k];
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    gx.iter_mut().for_each(|g| *g += gy[0]);
                }
            }
            Op::Mean(x) => {
                let n = nodes[x.0].value.numel() as f64;
                if let Some(gx) = slot(nodes, grads, *x) {
                    gx.iter_mut().for_each(|g| *g += gy[0] / n);
                }
            }
            Op::SumLastAxis(x) => {
                let cols = nodes[x.0].value.cols();
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (i, g) in gx.iter_mut().enumerate() {
                        *g += gy[i / cols];
                    }
                }
            }
        }
    }
}
