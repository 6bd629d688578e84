//! Reverse-mode automatic differentiation over [`Mat`] values.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters are
//! read through the graph, and each parameter maps to a single node however
//! many times it is read, so shared modules accumulate one gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{sigmoid, softplus, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddCol(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Square(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ShiftRows(Var, isize),
    LayerNormRows(Var, Vec<f64>),
    Sum(Var),
    Mean(Var),
    Pick(Var, usize, usize),
    BceWithLogits(Var, Mat),
    /// Forward value is the hard gate; the backward pass differentiates the
    /// stored relaxed sample `sigmoid((logit + noise) / tau)`.
    StraightThrough { logits: Var, soft: Vec<f64>, tau: f64 },
    /// Relaxed gate sample itself.
    SoftGate { logits: Var, tau: f64 },
}

struct Node {
    value: Mat,
    op: Op,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    reads: Vec<ParamId>,
    dropout: Option<(f64, ChaCha8Rng)>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(1024),
            param_vars: vec![None; params.len()],
            reads: Vec::new(),
            dropout: None,
        }
    }

    /// Turns on inverted dropout at rate `rate` for later [`Graph::dropout`]
    /// calls. Graphs start with it off, which is what evaluation wants.
    pub fn enable_dropout(&mut self, rate: f64, seed: u64) {
        assert!((0.0..1.0).contains(&rate), "dropout rate {rate} outside [0, 1)");
        self.dropout = (rate > 0.0).then(|| (rate, ChaCha8Rng::seed_from_u64(seed)));
    }

    /// Zeroes each entry with the configured probability and rescales the
    /// survivors; the identity while dropout is off.
    pub fn dropout(&mut self, x: Var) -> Var {
        let Some((rate, rng)) = self.dropout.as_mut() else {
            return x;
        };
        let (rows, cols) = self.nodes[x.0].value.shape();
        let keep = 1.0 / (1.0 - *rate);
        let data = (0..rows * cols).map(|_| if rng.gen::<f64>() < *rate { 0.0 } else { keep }).collect();
        let mask = self.constant(Mat::from_vec(rows, cols, data));
        self.mul(x, mask)
    }

    pub fn store(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Every parameter read so far, in read order, including repeats.
    pub fn param_reads(&self) -> &[ParamId] {
        &self.reads
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.reads.push(id);
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(self.params.get(id).clone(), Op::Param(id));
        self.param_vars[id.0] = Some(v);
        v
    }

    /// The node holding parameter `id`, if it has been read.
    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.param_vars[id.0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a * b^T`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_bt(self.value(b));
        self.push(v, Op::MatMulBt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (am, r) = (self.value(a), self.value(row));
        assert_eq!((1, am.cols()), r.shape(), "add_row expects a 1x{} row", am.cols());
        let mut v = am.clone();
        for i in 0..v.rows() {
            for (x, &b) in v.row_mut(i).iter_mut().zip(r.data()) {
                *x += b;
            }
        }
        self.push(v, Op::AddRow(a, row))
    }

    /// Adds an `m x 1` column to every column of `a`.
    pub fn add_col(&mut self, a: Var, col: Var) -> Var {
        let (am, c) = (self.value(a), self.value(col));
        assert_eq!((am.rows(), 1), c.shape(), "add_col expects a {}x1 column", am.rows());
        let mut v = am.clone();
        for i in 0..v.rows() {
            let b = c.data()[i];
            for x in v.row_mut(i) {
                *x += b;
            }
        }
        self.push(v, Op::AddCol(a, col))
    }

    /// Scales column `j` of `a` by `row[j]`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (am, r) = (self.value(a), self.value(row));
        assert_eq!((1, am.cols()), r.shape(), "mul_row expects a 1x{} row", am.cols());
        let mut v = am.clone();
        for i in 0..v.rows() {
            for (x, &b) in v.row_mut(i).iter_mut().zip(r.data()) {
                *x *= b;
            }
        }
        self.push(v, Op::MulRow(a, row))
    }

    /// Scales row `i` of `a` by `col[i]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (am, c) = (self.value(a), self.value(col));
        assert_eq!((am.rows(), 1), c.shape(), "mul_col expects a {}x1 column", am.rows());
        let mut v = am.clone();
        for i in 0..v.rows() {
            let b = c.data()[i];
            for x in v.row_mut(i) {
                *x *= b;
            }
        }
        self.push(v, Op::MulCol(a, col))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x * k);
        self.push(v, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x + k);
        self.push(v, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        self.push(v, Op::Gelu(a))
    }

    /// Same value as `a`, but no gradient flows back through it.
    pub fn detach(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.push(v, Op::Leaf)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let am = self.value(a);
        let mut v = am.clone();
        for i in 0..v.rows() {
            let row = v.row_mut(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for x in row {
                *x -= lse;
            }
        }
        self.push(v, Op::LogSoftmaxRows(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Mat> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Mat::concat_cols(&mats);
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let am = self.value(a);
        assert!(start + len <= am.cols(), "slice_cols out of range");
        let v = Mat::from_fn(am.rows(), len, |r, c| am.get(r, start + c));
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let am = self.value(a);
        assert!(start + len <= am.rows(), "slice_rows out of range");
        let cols = am.cols();
        let v = Mat::from_vec(len, cols, am.data()[start * cols..(start + len) * cols].to_vec());
        self.push(v, Op::SliceRows(a, start))
    }

    /// `out[i] = a[i + offset]`, zero where `i + offset` falls outside `a`.
    pub fn shift_rows(&mut self, a: Var, offset: isize) -> Var {
        let am = self.value(a);
        let rows = am.rows() as isize;
        let mut v = Mat::zeros(am.rows(), am.cols());
        for i in 0..rows {
            let src = i + offset;
            if (0..rows).contains(&src) {
                v.row_mut(i as usize).copy_from_slice(am.row(src as usize));
            }
        }
        self.push(v, Op::ShiftRows(a, offset))
    }

    /// Zero-mean, unit-variance rows (no affine part).
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let am = self.value(a);
        let n = am.cols() as f64;
        let mut v = am.clone();
        let mut inv_std = Vec::with_capacity(am.rows());
        for i in 0..v.rows() {
            let row = v.row_mut(i);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            for x in row {
                *x = (*x - mean) * is;
            }
            inv_std.push(is);
        }
        self.push(v, Op::LayerNormRows(a, inv_std))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Mat::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let am = self.value(a);
        let v = Mat::scalar(am.sum() / am.len() as f64);
        self.push(v, Op::Mean(a))
    }

    pub fn pick(&mut self, a: Var, r: usize, c: usize) -> Var {
        let v = Mat::scalar(self.value(a).get(r, c));
        self.push(v, Op::Pick(a, r, c))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against constant targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Mat) -> Var {
        let z = self.value(logits);
        assert_eq!(z.shape(), targets.shape(), "bce shape mismatch");
        let total: f64 = z.data().iter().zip(targets.data()).map(|(&z, &t)| softplus(z) - t * z).sum();
        let v = Mat::scalar(total / z.len() as f64);
        self.push(v, Op::BceWithLogits(logits, targets))
    }

    /// Hard two-class Gumbel gate with a straight-through gradient.
    /// `noise[i]` is the difference of the two classes' Gumbel draws.
    pub fn straight_through_gate(&mut self, logits: Var, noise: &[f64], tau: f64) -> Var {
        let z = self.value(logits);
        assert_eq!(z.len(), noise.len(), "one noise value per gate");
        let soft: Vec<f64> = z.data().iter().zip(noise).map(|(&l, &n)| sigmoid((l + n) / tau)).collect();
        let hard: Vec<f64> = z.data().iter().zip(noise).map(|(&l, &n)| if l + n > 0.0 { 1.0 } else { 0.0 }).collect();
        let v = Mat::from_vec(z.rows(), z.cols(), hard);
        self.push(v, Op::StraightThrough { logits, soft, tau })
    }

    /// Relaxed two-class Gumbel gate `sigmoid((logit + noise) / tau)`.
    pub fn soft_gate(&mut self, logits: Var, noise: &[f64], tau: f64) -> Var {
        let z = self.value(logits);
        assert_eq!(z.len(), noise.len(), "one noise value per gate");
        let soft: Vec<f64> = z.data().iter().zip(noise).map(|(&l, &n)| sigmoid((l + n) / tau)).collect();
        let v = Mat::from_vec(z.rows(), z.cols(), soft);
        self.push(v, Op::SoftGate { logits, tau })
    }

    /// Gradients of the scalar `loss` with respect to every parameter read.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        self.backward_seeded(&[(loss, Mat::scalar(1.0))])
    }

    /// Backward pass starting from arbitrary upstream gradients.
    pub fn backward_seeded(&self, seeds: &[(Var, Mat)]) -> Gradients {
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        let mut last = 0;
        for (v, g) in seeds {
            assert_eq!(self.value(*v).shape(), g.shape(), "seed shape mismatch");
            acc(&mut grads, *v, g.clone());
            last = last.max(v.0);
        }
        let mut out = Gradients::new(self.params.len());
        for idx in (0..=last).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.accumulate(*id, &g),
                Op::MatMul(a, b) => {
                    let ga = g.matmul_bt(self.value(*b));
                    let gb = self.value(*a).matmul_at(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulBt(a, b) => {
                    let ga = g.matmul(self.value(*b));
                    let gb = g.matmul_at(self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, g.map(|x| -x));
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y);
                    let gb = g.zip_map(self.value(*a), |x, y| x * y);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddRow(a, row) => {
                    let mut gr = Mat::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (s, &x) in gr.data_mut().iter_mut().zip(g.row(i)) {
                            *s += x;
                        }
                    }
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *a, g);
                }
                Op::AddCol(a, col) => {
                    let gc = Mat::from_fn(g.rows(), 1, |i, _| g.row(i).iter().sum());
                    acc(&mut grads, *col, gc);
                    acc(&mut grads, *a, g);
                }
                Op::MulRow(a, row) => {
                    let am = self.value(*a);
                    let r = self.value(*row);
                    let mut gr = Mat::zeros(1, g.cols());
                    let mut ga = g.clone();
                    for i in 0..g.rows() {
                        for j in 0..g.cols() {
                            gr.data_mut()[j] += g.get(i, j) * am.get(i, j);
                            ga.set(i, j, g.get(i, j) * r.data()[j]);
                        }
                    }
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *a, ga);
                }
                Op::MulCol(a, col) => {
                    let am = self.value(*a);
                    let c = self.value(*col);
                    let gc = Mat::from_fn(g.rows(), 1, |i, _| crate::tensor::dot(g.row(i), am.row(i)));
                    let mut ga = g;
                    for i in 0..ga.rows() {
                        let k = c.data()[i];
                        for x in ga.row_mut(i) {
                            *x *= k;
                        }
                    }
                    acc(&mut grads, *col, gc);
                    acc(&mut grads, *a, ga);
                }
                Op::Scale(a, k) => acc(&mut grads, *a, g.map(|x| x * k)),
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::Relu(a) => {
                    let ga = g.zip_map(self.value(*a), |x, y| if y > 0.0 { x } else { 0.0 });
                    acc(&mut grads, *a, ga);
                }
                Op::Gelu(a) => {
                    let ga = g.zip_map(self.value(*a), |x, y| x * gelu_grad(y));
                    acc(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = g.zip_map(&node.value, |x, y| x * y * (1.0 - y));
                    acc(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let ga = g.zip_map(&node.value, |x, y| x * (1.0 - y * y));
                    acc(&mut grads, *a, ga);
                }
                Op::Square(a) => {
                    let ga = g.zip_map(self.value(*a), |x, y| 2.0 * x * y);
                    acc(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = g.clone();
                    for i in 0..y.rows() {
                        let s = crate::tensor::dot(g.row(i), y.row(i));
                        for (j, x) in ga.row_mut(i).iter_mut().enumerate() {
                            *x = y.get(i, j) * (g.get(i, j) - s);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = g.clone();
                    for i in 0..y.rows() {
                        let s: f64 = g.row(i).iter().sum();
                        for (j, x) in ga.row_mut(i).iter_mut().enumerate() {
                            *x = g.get(i, j) - y.get(i, j).exp() * s;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.transpose()),
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let gp = Mat::from_fn(g.rows(), w, |r, c| g.get(r, offset + c));
                        acc(&mut grads, p, gp);
                        offset += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let am = self.value(*a);
                    let mut ga = Mat::zeros(am.rows(), am.cols());
                    for r in 0..g.rows() {
                        ga.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SliceRows(a, start) => {
                    let am = self.value(*a);
                    let mut ga = Mat::zeros(am.rows(), am.cols());
                    let cols = am.cols();
                    ga.data_mut()[start * cols..(start + g.rows()) * cols].copy_from_slice(g.data());
                    acc(&mut grads, *a, ga);
                }
                Op::ShiftRows(a, offset) => {
                    let rows = g.rows() as isize;
                    let mut ga = Mat::zeros(g.rows(), g.cols());
                    for i in 0..rows {
                        let src = i + offset;
                        if (0..rows).contains(&src) {
                            ga.row_mut(src as usize).copy_from_slice(g.row(i as usize));
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNormRows(a, inv_std) => {
                    let y = &node.value;
                    let n = y.cols() as f64;
                    let mut ga = Mat::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let gr = g.row(i);
                        let yr = y.row(i);
                        let mean_g = gr.iter().sum::<f64>() / n;
                        let mean_gy = crate::tensor::dot(gr, yr) / n;
                        for (j, x) in ga.row_mut(i).iter_mut().enumerate() {
                            *x = inv_std[i] * (gr[j] - mean_g - yr[j] * mean_gy);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let am = self.value(*a);
                    acc(&mut grads, *a, Mat::filled(am.rows(), am.cols(), g.item()));
                }
                Op::Mean(a) => {
                    let am = self.value(*a);
                    acc(&mut grads, *a, Mat::filled(am.rows(), am.cols(), g.item() / am.len() as f64));
                }
                Op::Pick(a, r, c) => {
                    let am = self.value(*a);
                    let mut ga = Mat::zeros(am.rows(), am.cols());
                    ga.set(*r, *c, g.item());
                    acc(&mut grads, *a, ga);
                }
                Op::BceWithLogits(z, t) => {
                    let zm = self.value(*z);
                    let k = g.item() / zm.len() as f64;
                    let gz = zm.zip_map(t, |z, t| (sigmoid(z) - t) * k);
                    acc(&mut grads, *z, gz);
                }
                Op::StraightThrough { logits, soft, tau } => {
                    let mut gl = g.clone();
                    for (x, &s) in gl.data_mut().iter_mut().zip(soft) {
                        *x *= s * (1.0 - s) / tau;
                    }
                    acc(&mut grads, *logits, gl);
                }
                Op::SoftGate { logits, tau } => {
                    let gl = g.zip_map(&node.value, |x, s| x * s * (1.0 - s) / tau);
                    acc(&mut grads, *logits, gl);
                }
            }
        }
        out
    }
}

fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn softmax_rows(m: &Mat) -> Mat {
    let mut v = m.clone();
    for i in 0..v.rows() {
        let row = v.row_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            total += *x;
        }
        for x in row.iter_mut() {
            *x /= total;
        }
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of `build` w.r.t. every entry of every parameter.
    fn check(store: &mut ParamStore, build: &dyn Fn(&mut Graph) -> Var) -> f64 {
        let grads = {
            let mut g = Graph::new(store);
            let loss = build(&mut g);
            g.backward(loss)
        };
        let eps = 1e-5;
        let mut worst: f64 = 0.0;
        let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            for k in 0..store.get(id).len() {
                let orig = store.get(id).data()[k];
                store.get_mut(id).data_mut()[k] = orig + eps;
                let plus = {
                    let mut g = Graph::new(store);
                    let l = build(&mut g);
                    g.value(l).item()
                };
                store.get_mut(id).data_mut()[k] = orig - eps;
                let minus = {
                    let mut g = Graph::new(store);
                    let l = build(&mut g);
                    g.value(l).item()
                };
                store.get_mut(id).data_mut()[k] = orig;
                let numeric = (plus - minus) / (2.0 * eps);
                let analytic = grads.get(id).map_or(0.0, |m| m.data()[k]);
                let err = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
                worst = worst.max(err);
            }
        }
        worst
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let a = store.add("a", Mat::randn(3, 4, 1.0, &mut rng), true);
        let b = store.add("b", Mat::randn(4, 2, 1.0, &mut rng), true);
        let row = store.add("row", Mat::randn(1, 2, 1.0, &mut rng), true);
        let col = store.add("col", Mat::randn(3, 1, 1.0, &mut rng), true);
        let noise: Vec<f64> = (0..3).map(|i| 0.3 * i as f64 - 0.2).collect();
        let build = move |g: &mut Graph| {
            let (a, b, row, col) = (g.param(a), g.param(b), g.param(row), g.param(col));
            let ab = g.matmul(a, b);
            let x = g.add_row(ab, row);
            let x = g.mul_col(x, col);
            let y = g.matmul_bt(x, x);
            let y = g.softmax_rows(y);
            let t = g.transpose(y);
            let z = g.sub(y, t);
            let z = g.tanh(z);
            let ls = g.log_softmax_rows(x);
            let ln = g.layer_norm_rows(a, 1e-5);
            let sh = g.shift_rows(ln, 1);
            let sl = g.slice_cols(sh, 1, 2);
            let cat = g.concat_cols(&[sl, ls]);
            let sig = g.sigmoid(cat);
            let mr = g.mul_row(x, row);
            let ac = g.add_col(mr, col);
            let rl = g.relu(ac);
            let rl = g.gelu(rl);
            let det = g.detach(rl);
            let rl = g.add(rl, det);
            let sq = g.square(rl);
            let head = g.slice_rows(sig, 0, 2);
            let p = g.pick(head, 1, 3);
            let logit = g.slice_cols(x, 0, 1);
            let soft = g.soft_gate(logit, &noise, 0.7);
            let bce = g.bce_with_logits(x, Mat::from_fn(3, 2, |r, c| ((r + c) % 2) as f64));
            let parts = [g.sum(z), g.mean(sq), p, g.sum(soft), bce, g.mean(sig)];
            let mut total = parts[0];
            for &part in &parts[1..] {
                total = g.add(total, part);
            }
            let m = g.mul(total, total);
            g.scale(m, 0.5)
        };
        let err = check(&mut store, &build);
        assert!(err < 1e-6, "worst relative error {err}");
    }

    #[test]
    fn straight_through_forward_is_hard_backward_is_relaxed() {
        let mut store = ParamStore::new();
        let l = store.add("l", Mat::column(&[0.5, -0.5, 2.0]), true);
        let noise = [0.0, 0.0, -3.0];
        let mut g = Graph::new(&store);
        let lv = g.param(l);
        let hard = g.straight_through_gate(lv, &noise, 0.5);
        assert_eq!(g.value(hard).data(), &[1.0, 0.0, 0.0]);
        let s = g.sum(hard);
        let grads = g.backward(s);
        let gl = grads.get(l).unwrap();
        let expect = |x: f64| {
            let s = sigmoid(x / 0.5);
            s * (1.0 - s) / 0.5
        };
        assert!((gl.data()[0] - expect(0.5)).abs() < 1e-12);
        assert!((gl.data()[2] - expect(-1.0)).abs() < 1e-12);
    }

    #[test]
    fn repeated_param_reads_share_one_node() {
        let mut store = ParamStore::new();
        let w = store.add("w", Mat::scalar(3.0), true);
        let mut g = Graph::new(&store);
        let a = g.param(w);
        let b = g.param(w);
        assert_eq!(a, b);
        let y = g.mul(a, b);
        let grads = g.backward(y);
        assert_eq!(grads.get(w).unwrap().item(), 6.0);
        assert_eq!(g.param_reads().len(), 2);
    }

    #[test]
    fn dropout_is_off_by_default_and_seeded() {
        let mut store = ParamStore::new();
        let x = store.add("x", Mat::from_fn(20, 10, |r, c| 1.0 + (r * 10 + c) as f64), true);
        let mut g = Graph::new(&store);
        let v = g.param(x);
        assert_eq!(g.dropout(v), v);

        let dropped = |seed| {
            let mut g = Graph::new(&store);
            g.enable_dropout(0.25, seed);
            let v = g.param(x);
            let d = g.dropout(v);
            g.value(d).clone()
        };
        let a = dropped(3);
        assert_eq!(a, dropped(3));
        assert_ne!(a, dropped(4));
        let zeros = a.data().iter().filter(|&&v| v == 0.0).count();
        assert!((30..70).contains(&zeros), "{zeros} of 200 dropped");
        for (d, o) in a.data().iter().zip(store.get(x).data()) {
            assert!(*d == 0.0 || (d - o / 0.75).abs() < 1e-12);
        }
    }
}
