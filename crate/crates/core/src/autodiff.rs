//! Tape-based reverse-mode differentiation over row-major 2D tensors.
//!
//! Operations are recorded on a [`Tape`] as they are evaluated; a single
//! call to [`Tape::backward`] walks the tape in reverse insertion order and
//! returns exact analytic gradients for a scalar loss. The primitive set is
//! exactly what the decomposition head and its losses need, plus two
//! gradient-routing nodes:
//!
//! - [`Tape::stop_gradient`]: identity forward, zero backward.
//! - [`Tape::ste_threshold`]: hard `p > 0.5` indicator forward, identity
//!   backward. This is `P + sg(1{P > 0.5} - P)` collapsed into one node.

use crate::error::{Error, Result};
use crate::par;

/// Probability clamp used inside [`Tape::kl_div`].
pub const KL_CLAMP: f64 = 1e-7;

/// Floor applied to the denominator of the relative error in [`grad_check`].
pub const GRAD_CHECK_FLOOR: f64 = 1e-3;

/// Dense row-major matrix. Vectors are `1 x n`, scalars `1 x 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{} values for a {rows}x{cols} tensor",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("tensor values must be finite"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::filled(1, 1, value)
    }

    /// A `1 x n` row vector.
    pub fn row(values: Vec<f64>) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values,
        }
    }

    /// Stacks equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("rows have different lengths"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Value of a `1 x 1` tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

// Rows per parallel block in the matmul kernels. Blocks are disjoint output
// rows, so results are identical for any worker count.
const MATMUL_BLOCK_ROWS: usize = 16;

/// `a (m x k) * b (k x n)`.
pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; m * n];
    par::for_each_row_block(&mut out, n, MATMUL_BLOCK_ROWS, |r0, block| {
        for (ri, orow) in block.chunks_mut(n).enumerate() {
            let arow = a.row_slice(r0 + ri);
            for (p, &av) in arow.iter().enumerate().take(k) {
                if av == 0.0 {
                    continue;
                }
                let brow = &b.data[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    });
    Tensor {
        rows: m,
        cols: n,
        data: out,
    }
}

/// `g (m x n) * b^T` where `b` is `k x n`.
fn matmul_bt(g: &Tensor, b: &Tensor) -> Tensor {
    let (m, n, k) = (g.rows, g.cols, b.rows);
    let mut out = vec![0.0; m * k];
    par::for_each_row_block(&mut out, k, MATMUL_BLOCK_ROWS, |r0, block| {
        for (ri, orow) in block.chunks_mut(k).enumerate() {
            let grow = g.row_slice(r0 + ri);
            for (p, o) in orow.iter_mut().enumerate() {
                let brow = &b.data[p * n..(p + 1) * n];
                *o = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
            }
        }
    });
    Tensor {
        rows: m,
        cols: k,
        data: out,
    }
}

/// `a^T * g` where `a` is `m x k` and `g` is `m x n`.
fn matmul_at(a: &Tensor, g: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows, a.cols, g.cols);
    let mut out = vec![0.0; k * n];
    par::for_each_row_block(&mut out, n, MATMUL_BLOCK_ROWS, |r0, block| {
        for (ri, orow) in block.chunks_mut(n).enumerate() {
            let p = r0 + ri;
            for i in 0..m {
                let av = a.data[i * k + p];
                if av == 0.0 {
                    continue;
                }
                for (o, &gv) in orow.iter_mut().zip(g.row_slice(i)) {
                    *o += av * gv;
                }
            }
        }
    });
    Tensor {
        rows: k,
        cols: n,
        data: out,
    }
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for row in out.data.chunks_mut(x.cols) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

/// Row-wise softmax of a tensor of logits.
pub fn softmax(logits: &Tensor) -> Tensor {
    softmax_rows(logits)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-log softmax(row)[label]`, computed without cancellation when `label`
/// holds the largest logit.
fn neg_log_softmax(row: &[f64], label: usize) -> f64 {
    let (jmax, m) = row
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (j, v)| if v > acc.1 { (j, v) } else { acc });
    let rest: f64 = row
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != jmax)
        .map(|(_, &v)| (v - m).exp())
        .sum();
    (m - row[label]) + rest.ln_1p()
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Const,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    OneMinus(Var),
    Sigmoid(Var),
    Softmax(Var),
    Log(Var),
    Relu(Var),
    L2NormSq(Var),
    Mean(Var),
    Sum(Var),
    KlDiv(Var, Var),
    CrossEntropy(Var, Vec<usize>),
    StopGrad,
    Ste(Var),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of operations for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that needed one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if `v` does not influence the loss
    /// through a differentiable path.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, with zeros standing in for "no path".
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape.0, shape.1))
    }
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{op}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A differentiable input (parameter).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Const, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols != tb.rows {
            return Err(Error::shape(format!(
                "matmul: {:?} x {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let out = matmul(ta, tb);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let out = self.value(a).zip(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    /// Adds a `1 x n` row to every row of an `m x n` tensor.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.rows != 1 || tr.cols != ta.cols {
            return Err(Error::shape(format!(
                "add_row: {:?} + {:?}",
                ta.shape(),
                tr.shape()
            )));
        }
        let mut out = ta.clone();
        for orow in out.data.chunks_mut(ta.cols) {
            for (o, b) in orow.iter_mut().zip(&tr.data) {
                *o += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(out, Op::AddRow(a, row), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let out = self.value(a).zip(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let out = self.value(a).zip(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|x| x * factor);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, factor), ng)
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| 1.0 - x);
        let ng = self.ng(a);
        self.push(out, Op::OneMinus(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        let ng = self.ng(a);
        self.push(out, Op::Softmax(a), ng)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.data.iter().any(|&v| v <= 0.0) {
            return Err(Error::invalid("log of a non-positive value"));
        }
        let out = t.map(f64::ln);
        let ng = self.ng(a);
        Ok(self.push(out, Op::Log(a), ng))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng)
    }

    /// Sum of squares of all elements, as a scalar.
    pub fn l2_norm_sq(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().map(|v| v * v).sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::L2NormSq(a), ng)
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data.iter().sum::<f64>() / t.len() as f64;
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    /// Row-mean of `KL(softmax(student) || softmax(teacher))`, summed over
    /// classes. Probabilities inside the logarithms are clamped to
    /// `[1e-7, 1]`. Gradients flow to both arguments unless the caller wraps
    /// one in [`Tape::stop_gradient`].
    pub fn kl_div(&mut self, student: Var, teacher: Var) -> Result<Var> {
        same_shape("kl_div", self.value(student), self.value(teacher))?;
        let p = softmax_rows(self.value(student));
        let q = softmax_rows(self.value(teacher));
        let rows = p.rows as f64;
        let total: f64 = p
            .data
            .iter()
            .zip(&q.data)
            .map(|(&pi, &qi)| pi * (pi.clamp(KL_CLAMP, 1.0).ln() - qi.clamp(KL_CLAMP, 1.0).ln()))
            .sum();
        let ng = self.ng(student) || self.ng(teacher);
        Ok(self.push(Tensor::scalar(total / rows), Op::KlDiv(student, teacher), ng))
    }

    /// Row-mean cross-entropy of logits against integer class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if labels.len() != t.rows {
            return Err(Error::shape(format!(
                "cross_entropy: {} labels for {} rows",
                labels.len(),
                t.rows
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= t.cols) {
            return Err(Error::shape(format!(
                "cross_entropy: label {bad} out of range for {} classes",
                t.cols
            )));
        }
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(r, &l)| neg_log_softmax(t.row_slice(r), l))
            .sum();
        let ng = self.ng(logits);
        let v = Tensor::scalar(total / t.rows as f64);
        Ok(self.push(v, Op::CrossEntropy(logits, labels.to_vec()), ng))
    }

    /// Identity forward; contributes nothing to any ancestor's gradient.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let out = self.value(a).clone();
        self.push(out, Op::StopGrad, false)
    }

    /// Forward `1` where `p > 0.5` (strict), else `0`; identity backward.
    pub fn ste_threshold(&mut self, p: Var) -> Var {
        let out = self.value(p).map(|x| if x > 0.5 { 1.0 } else { 0.0 });
        let ng = self.ng(p);
        self.push(out, Op::Ste(p), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if start + len > t.cols {
            return Err(Error::shape(format!(
                "slice_cols: [{start}, {}) of {} columns",
                start + len,
                t.cols
            )));
        }
        let mut data = Vec::with_capacity(t.rows * len);
        for r in 0..t.rows {
            data.extend_from_slice(&t.row_slice(r)[start..start + len]);
        }
        let out = Tensor {
            rows: t.rows,
            cols: len,
            data,
        };
        let ng = self.ng(a);
        Ok(self.push(out, Op::SliceCols(a, start), ng))
    }

    /// Row `i` of the output is row `index[i]` of `a`.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if let Some(&bad) = index.iter().find(|&&i| i >= t.rows) {
            return Err(Error::shape(format!(
                "gather_rows: row {bad} of {}",
                t.rows
            )));
        }
        let mut data = Vec::with_capacity(index.len() * t.cols);
        for &i in index {
            data.extend_from_slice(t.row_slice(i));
        }
        let out = Tensor {
            rows: index.len(),
            cols: t.cols,
            data,
        };
        let ng = self.ng(a);
        Ok(self.push(out, Op::GatherRows(a, index.to_vec()), ng))
    }

    /// Reverse pass from a `1 x 1` loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::shape("backward needs a scalar loss"));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let acc = |v: Var, contrib: Tensor, grads: &mut [Option<Tensor>]| {
            if !self.ng(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&contrib),
                slot @ None => *slot = Some(contrib),
            }
        };
        let val = |v: Var| self.value(v);

        match &node.op {
            Op::Leaf | Op::Const | Op::StopGrad => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    acc(*a, matmul_bt(g, val(*b)), grads);
                }
                if self.ng(*b) {
                    acc(*b, matmul_at(val(*a), g), grads);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone(), grads);
                acc(*b, g.clone(), grads);
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone(), grads);
                if self.ng(*row) {
                    let mut colsum = vec![0.0; g.cols];
                    for grow in g.data.chunks(g.cols) {
                        for (c, v) in colsum.iter_mut().zip(grow) {
                            *c += v;
                        }
                    }
                    acc(*row, Tensor::row(colsum), grads);
                }
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone(), grads);
                acc(*b, g.map(|x| -x), grads);
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    acc(*a, g.zip(val(*b), |x, y| x * y), grads);
                }
                if self.ng(*b) {
                    acc(*b, g.zip(val(*a), |x, y| x * y), grads);
                }
            }
            Op::Scale(a, f) => acc(*a, g.map(|x| x * f), grads),
            Op::OneMinus(a) => acc(*a, g.map(|x| -x), grads),
            Op::Sigmoid(a) => {
                acc(*a, g.zip(&node.value, |gx, s| gx * s * (1.0 - s)), grads);
            }
            Op::Softmax(a) => {
                let p = &node.value;
                let mut out = g.clone();
                for (orow, prow) in out.data.chunks_mut(p.cols).zip(p.data.chunks(p.cols)) {
                    let dot: f64 = orow.iter().zip(prow).map(|(x, y)| x * y).sum();
                    for (o, &pv) in orow.iter_mut().zip(prow) {
                        *o = pv * (*o - dot);
                    }
                }
                acc(*a, out, grads);
            }
            Op::Log(a) => acc(*a, g.zip(val(*a), |gx, x| gx / x), grads),
            Op::Relu(a) => {
                acc(*a, g.zip(val(*a), |gx, x| if x > 0.0 { gx } else { 0.0 }), grads);
            }
            Op::L2NormSq(a) => {
                let s = g.item();
                acc(*a, val(*a).map(|x| 2.0 * x * s), grads);
            }
            Op::Mean(a) => {
                let t = val(*a);
                let s = g.item() / t.len() as f64;
                acc(*a, Tensor::filled(t.rows, t.cols, s), grads);
            }
            Op::Sum(a) => {
                let t = val(*a);
                acc(*a, Tensor::filled(t.rows, t.cols, g.item()), grads);
            }
            Op::KlDiv(s, t) => {
                let p = softmax_rows(val(*s));
                let q = softmax_rows(val(*t));
                let scale = g.item() / p.rows as f64;
                let cols = p.cols;
                if self.ng(*s) {
                    // dKL/dp_j = ln c(p_j) - ln c(q_j) + [p_j unclamped]
                    let mut out = Tensor::zeros(p.rows, cols);
                    for r in 0..p.rows {
                        let (pr, qr) = (p.row_slice(r), q.row_slice(r));
                        let dp: Vec<f64> = pr
                            .iter()
                            .zip(qr)
                            .map(|(&pi, &qi)| {
                                let inside = if (KL_CLAMP..=1.0).contains(&pi) { 1.0 } else { 0.0 };
                                pi.clamp(KL_CLAMP, 1.0).ln() - qi.clamp(KL_CLAMP, 1.0).ln() + inside
                            })
                            .collect();
                        let dot: f64 = dp.iter().zip(pr).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            out.data[r * cols + c] = scale * pr[c] * (dp[c] - dot);
                        }
                    }
                    acc(*s, out, grads);
                }
                if self.ng(*t) {
                    // dKL/dq_j = -p_j / q_j where q_j is unclamped.
                    let mut out = Tensor::zeros(q.rows, cols);
                    for r in 0..q.rows {
                        let (pr, qr) = (p.row_slice(r), q.row_slice(r));
                        let dq: Vec<f64> = pr
                            .iter()
                            .zip(qr)
                            .map(|(&pi, &qi)| {
                                if (KL_CLAMP..=1.0).contains(&qi) {
                                    -pi / qi
                                } else {
                                    0.0
                                }
                            })
                            .collect();
                        let dot: f64 = dq.iter().zip(qr).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            out.data[r * cols + c] = scale * qr[c] * (dq[c] - dot);
                        }
                    }
                    acc(*t, out, grads);
                }
            }
            Op::CrossEntropy(logits, labels) => {
                let mut p = softmax_rows(val(*logits));
                let scale = g.item() / p.rows as f64;
                let cols = p.cols;
                for (r, &l) in labels.iter().enumerate() {
                    p.data[r * cols + l] -= 1.0;
                }
                for v in &mut p.data {
                    *v *= scale;
                }
                acc(*logits, p, grads);
            }
            Op::Ste(p) => acc(*p, g.clone(), grads),
            Op::SliceCols(a, start) => {
                let t = val(*a);
                let mut out = Tensor::zeros(t.rows, t.cols);
                for r in 0..t.rows {
                    out.data[r * t.cols + start..r * t.cols + start + g.cols]
                        .copy_from_slice(g.row_slice(r));
                }
                acc(*a, out, grads);
            }
            Op::GatherRows(a, index) => {
                let t = val(*a);
                let mut out = Tensor::zeros(t.rows, t.cols);
                for (i, &src) in index.iter().enumerate() {
                    for (o, v) in out.data[src * t.cols..(src + 1) * t.cols]
                        .iter_mut()
                        .zip(g.row_slice(i))
                    {
                        *o += v;
                    }
                }
                acc(*a, out, grads);
            }
        }
    }
}

/// Compares reverse-mode gradients of `f` against central finite
/// differences over every element of `params`, returning the largest
/// relative error `|a - n| / max(|a|, |n|, GRAD_CHECK_FLOOR)`.
///
/// `f` builds the loss on a fresh tape from leaves holding `params`.
pub fn grad_check<F>(params: &[Tensor], eps: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let all: Vec<Vec<usize>> = params.iter().map(|p| (0..p.len()).collect()).collect();
    Ok(grad_check_entries(params, &all, eps, f)?
        .into_iter()
        .fold(0.0, f64::max))
}

/// Like [`grad_check`], restricted to the listed element indices of each
/// tensor. Returns the worst relative error per tensor (0 when none checked).
pub fn grad_check_entries<F>(params: &[Tensor], entries: &[Vec<usize>], eps: f64, f: F) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if entries.len() != params.len() {
        return Err(Error::shape("one entry list per parameter tensor is required"));
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut worst = vec![0.0f64; params.len()];
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*v, params[pi].shape());
        for &e in &entries[pi] {
            if e >= params[pi].len() {
                return Err(Error::shape(format!("entry {e} outside tensor {pi}")));
            }
            let orig = params[pi].data[e];
            work[pi].data[e] = orig + eps;
            let up = eval(&work)?;
            work[pi].data[e] = orig - eps;
            let down = eval(&work)?;
            work[pi].data[e] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.data[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            worst[pi] = worst[pi].max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::new(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::row(vec![0.0, 0.0]));
        let s = t.softmax(x);
        assert_eq!(t.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn l2_of_zero_vector() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(1, 4));
        let l = t.l2_norm_sq(x);
        assert_eq!(t.value(l).item(), 0.0);
        let g = t.backward(l).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cross_entropy_confident_logits() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::row(vec![10.0, -10.0]));
        let ce = t.cross_entropy(x, &[0]).unwrap();
        let expected = (-20f64).exp().ln_1p();
        assert!((t.value(ce).item() - expected).abs() / expected < 1e-9);
        assert!((t.value(ce).item() - 2.06e-9).abs() < 1e-11);
    }

    #[test]
    fn stop_gradient_blocks_everything() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0));
        let sx = t.stop_gradient(x);
        let l = t.l2_norm_sq(sx);
        let g = t.backward(l).unwrap();
        assert!(g.get(x).is_none());

        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0));
        let sx = t.stop_gradient(x);
        let l = t.mul(x, sx).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 3.0);
    }

    #[test]
    fn ste_forward_and_backward() {
        let mut t = Tape::new();
        let p = t.leaf(Tensor::row(vec![0.9, 0.1, 0.5]));
        let m = t.ste_threshold(p);
        assert_eq!(t.value(m).data(), &[1.0, 0.0, 0.0]);

        let z = t.constant(Tensor::row(vec![2.0, -3.0, 0.25]));
        let zm = t.mul(z, m).unwrap();
        let l = t.sum(zm);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(p).unwrap().data(), &[2.0, -3.0, 0.25]);
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(vec![1.0, 0.0]));
        assert!(t.log(x).is_err());
    }

    #[test]
    fn shape_errors() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(2, 3));
        let b = t.leaf(Tensor::zeros(2, 3));
        assert!(t.matmul(a, b).is_err());
        let c = t.leaf(Tensor::zeros(3, 2));
        assert!(t.add(a, c).is_err());
        assert!(t.cross_entropy(a, &[0]).is_err());
        assert!(t.cross_entropy(a, &[0, 3]).is_err());
        assert!(t.backward(a).is_err());
    }

    #[test]
    fn kl_example_value() {
        let mut t = Tape::new();
        let s = t.leaf(Tensor::row(vec![0.0, 0.0]));
        let q = t.leaf(Tensor::row(vec![3f64.ln(), 0.0]));
        let kl = t.kl_div(s, q).unwrap();
        let expected = 0.5 * (2.0f64 / 3.0).ln() + 0.5 * 2f64.ln();
        assert!((t.value(kl).item() - expected).abs() < 1e-12);
        assert!((expected - 0.1438).abs() < 1e-4);
    }

    #[test]
    fn quadratic_grad_check() {
        let w = Tensor::row(vec![0.3, -1.2, 2.0, 0.7]);
        let err = grad_check(&[w], 1e-4, |t, v| Ok(t.l2_norm_sq(v[0]))).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    // Every primitive against central differences, seeded, 100 trials.
    #[test]
    fn primitives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut worst = 0.0f64;
        for trial in 0..100 {
            let a = random(&mut rng, 3, 4);
            let b = random(&mut rng, 4, 2);
            let c = random(&mut rng, 3, 4);
            let bias = random(&mut rng, 1, 2);
            let pos = Tensor::new(3, 4, a.data().iter().map(|v| v.abs() + 0.5).collect()).unwrap();
            let labels = [trial % 2, 1, 0];
            let err = grad_check(&[a, b, c, bias, pos], 1e-4, |t, v| {
                let mm = t.matmul(v[0], v[1])?;
                let mm = t.add_row(mm, v[3])?;
                let sig = t.sigmoid(v[2]);
                let prod = t.mul(v[0], sig)?;
                let diff = t.sub(prod, v[2])?;
                let r = t.relu(diff);
                let om = t.one_minus(r);
                let lg = t.log(v[4])?;
                let mixed = t.add(om, lg)?;
                let sl = t.slice_cols(mixed, 1, 2)?;
                let gathered = t.gather_rows(sl, &[2, 0, 2])?;
                let ce = t.cross_entropy(mm, &labels)?;
                let kl = t.kl_div(gathered, mm)?;
                let sm = t.softmax(mixed);
                let sm = t.l2_norm_sq(sm);
                let mean = t.mean(diff);
                let sum = t.sum(gathered);
                let sum = t.scale(sum, 0.3);
                let l = t.add(ce, kl)?;
                let l = t.add(l, sm)?;
                let l = t.add(l, mean)?;
                t.add(l, sum)
            })
            .unwrap();
            worst = worst.max(err);
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn backward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, 8, 8);
        let run = || {
            let mut t = Tape::new();
            let x = t.leaf(a.clone());
            let y = t.matmul(x, x).unwrap();
            let y = t.softmax(y);
            let l = t.l2_norm_sq(y);
            t.backward(l).unwrap().get(x).unwrap().clone()
        };
        assert_eq!(run(), run());
    }
}
