//! Dense row-major matrices and a tape-based reverse-mode autodiff engine.
//!
//! A [`Tape`] is built fresh for every forward pass. Leaves are registered
//! with [`Tape::leaf`]; every operation appends a node whose inputs precede
//! it, so the node order is already topological. [`Tape::backward`] walks
//! the nodes in reverse once and fills in gradients for every node that
//! requires one.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("{op}: selection is empty")]
    EmptyBatch { op: &'static str },
    #[error("{op}: index {index} out of bounds for size {bound}")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("tape state error: {0}")]
    State(String),
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense row-major matrix of `f64`.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix {}x{} ", self.rows, self.cols)?;
        f.debug_list()
            .entries(self.data.chunks(self.cols.max(1)))
            .finish()
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(TensorError::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for
    /// literals in tests and examples.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
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

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn dot(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(TensorError::Dimension {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let out_row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Matrix {
            rows: m,
            cols: n,
            data: out,
        })
    }

    /// `selfᵀ · other` without materializing the transpose.
    fn t_dot(&self, other: &Matrix) -> Matrix {
        let (k, m, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; m * n];
        for p in 0..k {
            let b_row = &other.data[p * n..(p + 1) * n];
            for i in 0..m {
                let a = self.data[p * m + i];
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out[i * n..(i + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Matrix {
            rows: m,
            cols: n,
            data: out,
        }
    }

    /// `self · otherᵀ` without materializing the transpose.
    fn dot_t(&self, other: &Matrix) -> Matrix {
        let (m, k, n) = (self.rows, self.cols, other.rows);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let b_row = &other.data[j * k..(j + 1) * k];
                out[i * n + j] = a_row.iter().zip(b_row).map(|(a, b)| a * b).sum();
            }
        }
        Matrix {
            rows: m,
            cols: n,
            data: out,
        }
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scaled(&self, s: f64) -> Matrix {
        self.map(|x| x * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Row-wise argmax; ties resolve to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows)
            .map(|r| {
                let row = self.row(r);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

/// `(l1, l2)` norms over all entries.
pub fn norms(m: &Matrix) -> (f64, f64) {
    let l1 = m.data.iter().map(|x| x.abs()).sum();
    (l1, m.frobenius())
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Sigmoid,
    LeakyRelu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregation {
    Sum,
    Mean,
}

/// Elementwise operation selector for [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Relu,
    Sigmoid,
    LeakyRelu(f64),
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(Binary, Var, Var),
    Relu(Var),
    Sigmoid(Var),
    LeakyRelu(Var, f64),
    Scale(Var, f64),
    Scatter {
        src: Var,
        targets: Vec<usize>,
        inv_counts: Option<Vec<f64>>,
    },
    Gather {
        src: Var,
        index: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    SumAll(Var),
    SumCols(Var),
    SegmentSoftmax {
        src: Var,
        groups: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        probs: Matrix,
        selected: Vec<(usize, usize)>,
    },
    BceLogits {
        logits: Var,
        targets: Vec<f64>,
    },
}

struct Node {
    value: Matrix,
    requires_grad: bool,
    grad: Option<Matrix>,
    op: Op,
}

/// Records operations for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

enum Bcast {
    Same,
    Row,
    Col,
    Scalar,
}

fn broadcast_kind(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<Bcast> {
    if a == b {
        Ok(Bcast::Same)
    } else if b == (1, 1) {
        Ok(Bcast::Scalar)
    } else if b.0 == 1 && b.1 == a.1 {
        Ok(Bcast::Row)
    } else if b.1 == 1 && b.0 == a.0 {
        Ok(Bcast::Col)
    } else {
        Err(TensorError::Dimension {
            op,
            left: a,
            right: b,
        })
    }
}

#[inline]
fn bcast_index(kind: &Bcast, cols: usize, idx: usize) -> usize {
    match kind {
        Bcast::Same => idx,
        Bcast::Row => idx % cols,
        Bcast::Col => idx / cols,
        Bcast::Scalar => 0,
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
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

    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Matrix> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Matrix> {
        self.nodes[v.0].grad.take()
    }

    /// Positivity pattern of every relu / leaky-relu input on the tape, in
    /// recording order. Two forward passes with equal signatures traverse
    /// the same linear region.
    pub fn activation_signature(&self) -> Vec<bool> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(x) | Op::LeakyRelu(x, _) = node.op {
                sig.extend(self.nodes[x.0].value.data.iter().map(|&v| v > 0.0));
            }
        }
        sig
    }

    fn push(&mut self, op: &'static str, value: Matrix, inputs: &[Var], kind: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op: kind,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).dot(self.value(b))?;
        self.push("matmul", out, &[a, b], Op::MatMul(a, b))
    }

    /// Binary elementwise op. `b` may match `a`, be a `1×n` row, an `m×1`
    /// column, or a `1×1` scalar.
    pub fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        };
        let (av, bv) = (self.value(a), self.value(b));
        let bk = broadcast_kind(name, av.shape(), bv.shape())?;
        let cols = av.cols;
        let data = av
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = bv.data[bcast_index(&bk, cols, i)];
                match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                }
            })
            .collect();
        let out = Matrix {
            rows: av.rows,
            cols,
            data,
        };
        self.push(name, out, &[a, b], Op::Binary(kind, a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push("relu", out, &[x], Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        self.push("sigmoid", out, &[x], Op::Sigmoid(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        self.push("leaky_relu", out, &[x], Op::LeakyRelu(x, slope))
    }

    pub fn elementwise(&mut self, op: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = || {
            b.ok_or_else(|| TensorError::Shape("binary elementwise op needs two operands".into()))
        };
        match op {
            Elementwise::Add => self.add(a, need_b()?),
            Elementwise::Sub => self.sub(a, need_b()?),
            Elementwise::Mul => self.mul(a, need_b()?),
            Elementwise::Relu => self.relu(a),
            Elementwise::Sigmoid => self.sigmoid(a),
            Elementwise::LeakyRelu(s) => self.leaky_relu(a, s),
        }
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.value(x).scaled(s);
        self.push("scale", out, &[x], Op::Scale(x, s))
    }

    /// Row `i` of the output is the sum (or mean) of the message rows whose
    /// target is `i`; nodes without messages get a zero row.
    pub fn scatter_aggregate(
        &mut self,
        messages: Var,
        targets: &[usize],
        p: usize,
        mode: Aggregation,
    ) -> Result<Var> {
        let mv = self.value(messages);
        if mv.rows != targets.len() {
            return Err(TensorError::Shape(format!(
                "scatter: {} message rows but {} targets",
                mv.rows,
                targets.len()
            )));
        }
        let d = mv.cols;
        let mut out = Matrix::zeros(p, d);
        let mut counts = vec![0usize; p];
        for (e, &t) in targets.iter().enumerate() {
            if t >= p {
                return Err(TensorError::Index {
                    op: "scatter_aggregate",
                    index: t,
                    bound: p,
                });
            }
            counts[t] += 1;
            let src = &mv.data[e * d..(e + 1) * d];
            for (o, &s) in out.row_mut(t).iter_mut().zip(src) {
                *o += s;
            }
        }
        let inv_counts = match mode {
            Aggregation::Sum => None,
            Aggregation::Mean => {
                let inv: Vec<f64> = counts
                    .iter()
                    .map(|&c| if c == 0 { 0.0 } else { 1.0 / c as f64 })
                    .collect();
                for (i, &s) in inv.iter().enumerate() {
                    for v in out.row_mut(i) {
                        *v *= s;
                    }
                }
                Some(inv)
            }
        };
        self.push(
            "scatter_aggregate",
            out,
            &[messages],
            Op::Scatter {
                src: messages,
                targets: targets.to_vec(),
                inv_counts,
            },
        )
    }

    /// Output row `e` is row `index[e]` of `src`.
    pub fn gather_rows(&mut self, src: Var, index: &[usize]) -> Result<Var> {
        let sv = self.value(src);
        let d = sv.cols;
        let mut data = Vec::with_capacity(index.len() * d);
        for &i in index {
            if i >= sv.rows {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: i,
                    bound: sv.rows,
                });
            }
            data.extend_from_slice(sv.row(i));
        }
        let out = Matrix {
            rows: index.len(),
            cols: d,
            data,
        };
        self.push(
            "gather_rows",
            out,
            &[src],
            Op::Gather {
                src,
                index: index.to_vec(),
            },
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Shape("concat_rows of nothing".into()))?;
        let cols = self.value(*first).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols != cols {
                return Err(TensorError::Dimension {
                    op: "concat_rows",
                    left: self.value(*first).shape(),
                    right: v.shape(),
                });
            }
            rows += v.rows;
            data.extend_from_slice(&v.data);
        }
        let out = Matrix { rows, cols, data };
        self.push("concat_rows", out, parts, Op::ConcatRows(parts.to_vec()))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let out = Matrix::scalar(self.value(x).sum());
        self.push("sum", out, &[x], Op::SumAll(x))
    }

    /// Sums each row, giving an `m×1` column.
    pub fn sum_cols(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let data = (0..v.rows).map(|r| v.row(r).iter().sum()).collect();
        let out = Matrix {
            rows: v.rows,
            cols: 1,
            data,
        };
        self.push("sum_cols", out, &[x], Op::SumCols(x))
    }

    /// Softmax of a `k×1` score column within each group.
    pub fn segment_softmax(&mut self, scores: Var, groups: &[usize]) -> Result<Var> {
        let sv = self.value(scores);
        if sv.cols != 1 || sv.rows != groups.len() {
            return Err(TensorError::Shape(format!(
                "segment_softmax expects a {}x1 column, got {}x{}",
                groups.len(),
                sv.rows,
                sv.cols
            )));
        }
        let n_groups = groups.iter().copied().max().map_or(0, |g| g + 1);
        let mut maxes = vec![f64::NEG_INFINITY; n_groups];
        for (e, &g) in groups.iter().enumerate() {
            maxes[g] = maxes[g].max(sv.data[e]);
        }
        let mut exps: Vec<f64> = groups
            .iter()
            .enumerate()
            .map(|(e, &g)| (sv.data[e] - maxes[g]).exp())
            .collect();
        let mut totals = vec![0.0; n_groups];
        for (e, &g) in groups.iter().enumerate() {
            totals[g] += exps[e];
        }
        for (e, &g) in groups.iter().enumerate() {
            exps[e] /= totals[g];
        }
        let out = Matrix {
            rows: groups.len(),
            cols: 1,
            data: exps,
        };
        self.push(
            "segment_softmax",
            out,
            &[scores],
            Op::SegmentSoftmax {
                src: scores,
                groups: groups.to_vec(),
            },
        )
    }

    /// Mean over the selected rows of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let lv = self.value(logits);
        let (n, k) = lv.shape();
        if labels.len() != n {
            return Err(TensorError::Shape(format!(
                "{} labels for {n} logit rows",
                labels.len()
            )));
        }
        if let Some(m) = mask {
            if m.len() != n {
                return Err(TensorError::Shape(format!(
                    "mask of length {} for {n} logit rows",
                    m.len()
                )));
            }
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::Label { label, classes: k });
        }
        let selected: Vec<(usize, usize)> = (0..n)
            .filter(|&r| mask.is_none_or(|m| m[r]))
            .map(|r| (r, labels[r]))
            .collect();
        if selected.is_empty() {
            return Err(TensorError::EmptyBatch {
                op: "softmax_cross_entropy",
            });
        }
        let mut probs = Matrix::zeros(n, k);
        let mut total = 0.0;
        for &(r, y) in &selected {
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = row.iter().map(|&x| (x - max).exp()).sum();
            let log_z = max + sum_exp.ln();
            total += log_z - row[y];
            for (p, &x) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (x - log_z).exp();
            }
        }
        let out = Matrix::scalar(total / selected.len() as f64);
        self.push(
            "softmax_cross_entropy",
            out,
            &[logits],
            Op::CrossEntropy {
                logits,
                probs,
                selected,
            },
        )
    }

    /// Mean binary cross-entropy of a `k×1` logit column against 0/1 targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.cols != 1 || lv.rows != targets.len() {
            return Err(TensorError::Shape(format!(
                "bce expects a {}x1 column, got {}x{}",
                targets.len(),
                lv.rows,
                lv.cols
            )));
        }
        if targets.is_empty() {
            return Err(TensorError::EmptyBatch {
                op: "bce_with_logits",
            });
        }
        let total: f64 = lv
            .data
            .iter()
            .zip(targets)
            .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
            .sum();
        let out = Matrix::scalar(total / targets.len() as f64);
        self.push(
            "bce_with_logits",
            out,
            &[logits],
            Op::BceLogits {
                logits,
                targets: targets.to_vec(),
            },
        )
    }

    fn accumulate(&mut self, v: Var, g: Matrix) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Reverse sweep from a scalar loss. A tape supports exactly one sweep.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(TensorError::State(
                "backward already ran on this tape".into(),
            ));
        }
        if self.shape(loss) != (1, 1) {
            return Err(TensorError::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(Matrix::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[idx].grad.clone() else {
                continue;
            };
            // Temporarily move the op out so inputs can be borrowed mutably.
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
            self.propagate(idx, &op, &g);
            self.nodes[idx].op = op;
        }
        Ok(())
    }

    fn propagate(&mut self, idx: usize, op: &Op, g: &Matrix) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    let ga = g.dot_t(self.value(*b));
                    self.accumulate(*a, ga);
                }
                if self.requires_grad(*b) {
                    let gb = self.value(*a).t_dot(g);
                    self.accumulate(*b, gb);
                }
            }
            Op::Binary(kind, a, b) => {
                let (ash, bsh) = (self.shape(*a), self.shape(*b));
                let bk = broadcast_kind("binary", ash, bsh).expect("checked in forward");
                let cols = ash.1;
                if self.requires_grad(*a) {
                    let ga = match kind {
                        Binary::Add | Binary::Sub => g.clone(),
                        Binary::Mul => {
                            let bv = self.value(*b);
                            let data = g
                                .data
                                .iter()
                                .enumerate()
                                .map(|(i, &gi)| gi * bv.data[bcast_index(&bk, cols, i)])
                                .collect();
                            Matrix {
                                rows: g.rows,
                                cols,
                                data,
                            }
                        }
                    };
                    self.accumulate(*a, ga);
                }
                if self.requires_grad(*b) {
                    let mut gb = Matrix::zeros(bsh.0, bsh.1);
                    let av = self.value(*a);
                    for (i, &gi) in g.data.iter().enumerate() {
                        let contrib = match kind {
                            Binary::Add => gi,
                            Binary::Sub => -gi,
                            Binary::Mul => gi * av.data[i],
                        };
                        gb.data[bcast_index(&bk, cols, i)] += contrib;
                    }
                    self.accumulate(*b, gb);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let data = g
                    .data
                    .iter()
                    .zip(&xv.data)
                    .map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 })
                    .collect();
                let gx = Matrix {
                    rows: g.rows,
                    cols: g.cols,
                    data,
                };
                self.accumulate(*x, gx);
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x);
                let data = g
                    .data
                    .iter()
                    .zip(&xv.data)
                    .map(|(&gi, &xi)| if xi > 0.0 { gi } else { slope * gi })
                    .collect();
                let gx = Matrix {
                    rows: g.rows,
                    cols: g.cols,
                    data,
                };
                self.accumulate(*x, gx);
            }
            Op::Sigmoid(x) => {
                let yv = &self.nodes[idx].value;
                let data = g
                    .data
                    .iter()
                    .zip(&yv.data)
                    .map(|(&gi, &y)| gi * y * (1.0 - y))
                    .collect();
                let gx = Matrix {
                    rows: g.rows,
                    cols: g.cols,
                    data,
                };
                self.accumulate(*x, gx);
            }
            Op::Scale(x, s) => self.accumulate(*x, g.scaled(*s)),
            Op::Scatter {
                src,
                targets,
                inv_counts,
            } => {
                let d = g.cols;
                let mut gs = Matrix::zeros(targets.len(), d);
                for (e, &t) in targets.iter().enumerate() {
                    let s = inv_counts.as_ref().map_or(1.0, |c| c[t]);
                    for (o, &gi) in gs.row_mut(e).iter_mut().zip(g.row(t)) {
                        *o = gi * s;
                    }
                }
                self.accumulate(*src, gs);
            }
            Op::Gather { src, index } => {
                let (r, c) = self.shape(*src);
                let mut gs = Matrix::zeros(r, c);
                for (e, &i) in index.iter().enumerate() {
                    for (o, &gi) in gs.row_mut(i).iter_mut().zip(g.row(e)) {
                        *o += gi;
                    }
                }
                self.accumulate(*src, gs);
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols;
                let mut offset = 0;
                for &p in parts {
                    let rows = self.shape(p).0;
                    if self.requires_grad(p) {
                        let data = g.data[offset * cols..(offset + rows) * cols].to_vec();
                        self.accumulate(p, Matrix { rows, cols, data });
                    }
                    offset += rows;
                }
            }
            Op::SumAll(x) => {
                let (r, c) = self.shape(*x);
                self.accumulate(*x, Matrix::filled(r, c, g.data[0]));
            }
            Op::SumCols(x) => {
                let (r, c) = self.shape(*x);
                let mut gx = Matrix::zeros(r, c);
                for i in 0..r {
                    let gi = g.data[i];
                    gx.row_mut(i).iter_mut().for_each(|v| *v = gi);
                }
                self.accumulate(*x, gx);
            }
            Op::SegmentSoftmax { src, groups } => {
                let alpha = &self.nodes[idx].value;
                let n_groups = groups.iter().copied().max().map_or(0, |m| m + 1);
                let mut weighted = vec![0.0; n_groups];
                for (e, &grp) in groups.iter().enumerate() {
                    weighted[grp] += alpha.data[e] * g.data[e];
                }
                let data = groups
                    .iter()
                    .enumerate()
                    .map(|(e, &grp)| alpha.data[e] * (g.data[e] - weighted[grp]))
                    .collect();
                let gx = Matrix {
                    rows: groups.len(),
                    cols: 1,
                    data,
                };
                self.accumulate(*src, gx);
            }
            Op::CrossEntropy {
                logits,
                probs,
                selected,
            } => {
                let scale = g.data[0] / selected.len() as f64;
                let mut gl = Matrix::zeros(probs.rows, probs.cols);
                for &(r, y) in selected {
                    for (o, &p) in gl.row_mut(r).iter_mut().zip(probs.row(r)) {
                        *o = p * scale;
                    }
                    gl.data[r * probs.cols + y] -= scale;
                }
                self.accumulate(*logits, gl);
            }
            Op::BceLogits { logits, targets } => {
                let scale = g.data[0] / targets.len() as f64;
                let lv = self.value(*logits);
                let data = lv
                    .data
                    .iter()
                    .zip(targets)
                    .map(|(&x, &y)| (sigmoid(x) - y) * scale)
                    .collect();
                let gl = Matrix {
                    rows: targets.len(),
                    cols: 1,
                    data,
                };
                self.accumulate(*logits, gl);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_and_hand_values() {
        let mut t = Tape::new();
        let i = t.constant(Matrix::identity(2));
        let b = t.constant(Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]));
        let out = t.matmul(i, b).unwrap();
        assert_eq!(t.value(out), t.value(b));

        let a = t.constant(Matrix::from_rows(&[[1.0, 2.0]]));
        let c = t.constant(Matrix::from_rows(&[[3.0], [4.0]]));
        let out = t.matmul(a, c).unwrap();
        assert_eq!(t.value(out).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Matrix::zeros(2, 3));
        let b = t.constant(Matrix::zeros(2, 3));
        let err = t.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::Dimension {
                op: "matmul",
                left: (2, 3),
                right: (2, 3)
            }
        );
        assert!(err.to_string().contains("(2, 3)"));
    }

    #[test]
    fn matmul_backward_hand_value() {
        let mut t = Tape::new();
        let a = t.leaf(Matrix::from_rows(&[[1.0, 2.0]]), true);
        let b = t.constant(Matrix::from_rows(&[[3.0], [4.0]]));
        let y = t.matmul(a, b).unwrap();
        let s = t.sum_all(y).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(a).unwrap().data(), &[3.0, 4.0]);
        assert!(t.grad(b).is_none());
    }

    #[test]
    fn cross_entropy_saturated_and_uniform() {
        let mut t = Tape::new();
        let l = t.constant(Matrix::from_rows(&[[1000.0, 0.0]]));
        let loss = t.softmax_cross_entropy(l, &[0], None).unwrap();
        assert!(t.value(loss).data()[0].abs() < 1e-12);

        let l = t.constant(Matrix::from_rows(&[[0.0, 0.0]]));
        let loss = t.softmax_cross_entropy(l, &[0], None).unwrap();
        assert!((t.value(loss).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_errors() {
        let mut t = Tape::new();
        let l = t.constant(Matrix::zeros(2, 3));
        assert_eq!(
            t.softmax_cross_entropy(l, &[0, 3], None).unwrap_err(),
            TensorError::Label {
                label: 3,
                classes: 3
            }
        );
        assert!(matches!(
            t.softmax_cross_entropy(l, &[0, 1], Some(&[false, false])),
            Err(TensorError::EmptyBatch { .. })
        ));
    }

    #[test]
    fn cross_entropy_backward_is_zero_on_masked_rows() {
        let mut t = Tape::new();
        let l = t.leaf(Matrix::from_rows(&[[0.3, -0.2], [1.0, 2.0]]), true);
        let loss = t.softmax_cross_entropy(l, &[1, 0], Some(&[true, false])).unwrap();
        t.backward(loss).unwrap();
        let g = t.grad(l).unwrap();
        assert_eq!(g.row(1), &[0.0, 0.0]);
        assert!((g.row(0).iter().sum::<f64>()).abs() < 1e-15);
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::from_rows(&[[-1.0, 0.0, 2.0]]), true);
        let y = t.relu(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = t.sum_all(y).unwrap();
        t.backward(s).unwrap();
        // tie at exactly zero passes no gradient
        assert_eq!(t.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);

        let mut t = Tape::new();
        let z = t.constant(Matrix::scalar(0.0));
        let y = t.sigmoid(z).unwrap();
        assert_eq!(t.value(y).data(), &[0.5]);
    }

    #[test]
    fn elementwise_requires_second_operand() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::zeros(1, 2));
        assert!(matches!(
            t.elementwise(Elementwise::Add, x, None),
            Err(TensorError::Shape(_))
        ));
        let y = t.constant(Matrix::zeros(3, 3));
        assert!(matches!(
            t.elementwise(Elementwise::Mul, x, Some(y)),
            Err(TensorError::Dimension { .. })
        ));
    }

    #[test]
    fn scatter_examples() {
        let mut t = Tape::new();
        let empty = t.constant(Matrix::zeros(0, 2));
        let out = t.scatter_aggregate(empty, &[], 3, Aggregation::Sum).unwrap();
        assert_eq!(t.value(out), &Matrix::zeros(3, 2));

        let m = t.leaf(Matrix::from_rows(&[[1.0, 1.0], [3.0, 3.0]]), true);
        let out = t.scatter_aggregate(m, &[0, 0], 2, Aggregation::Mean).unwrap();
        assert_eq!(t.value(out), &Matrix::from_rows(&[[2.0, 2.0], [0.0, 0.0]]));

        assert!(matches!(
            t.scatter_aggregate(m, &[0, 2], 2, Aggregation::Sum),
            Err(TensorError::Index { index: 2, .. })
        ));
    }

    #[test]
    fn scatter_sum_backward_copies_target_gradient() {
        let mut t = Tape::new();
        let m = t.leaf(Matrix::from_rows(&[[1.0], [2.0], [3.0]]), true);
        let agg = t.scatter_aggregate(m, &[1, 0, 1], 2, Aggregation::Sum).unwrap();
        let w = t.constant(Matrix::from_rows(&[[5.0], [7.0]]));
        let y = t.mul(agg, w).unwrap();
        let s = t.sum_all(y).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(m).unwrap().data(), &[7.0, 5.0, 7.0]);
    }

    #[test]
    fn norms_examples() {
        assert_eq!(norms(&Matrix::zeros(2, 2)), (0.0, 0.0));
        assert_eq!(norms(&Matrix::from_rows(&[[3.0, 4.0]])), (7.0, 5.0));
        let (l1, l2) = norms(&Matrix::from_rows(&[[-1.0, 1.0]]));
        assert_eq!(l1, 2.0);
        assert!((l2 - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn backward_contract() {
        let mut t = Tape::new();
        let w = t.leaf(Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]), true);
        let c = t.leaf(Matrix::zeros(2, 2), false);
        let y = t.add(w, c).unwrap();
        let s = t.sum_all(y).unwrap();
        assert!(matches!(t.backward(y), Err(TensorError::Shape(_))));
        t.backward(s).unwrap();
        assert_eq!(t.grad(w).unwrap(), &Matrix::filled(2, 2, 1.0));
        assert!(t.grad(c).is_none());
        assert!(matches!(t.backward(s), Err(TensorError::State(_))));
    }

    #[test]
    fn segment_softmax_groups_sum_to_one() {
        let mut t = Tape::new();
        let s = t.constant(Matrix::from_rows(&[[0.5], [2.0], [-1.0], [3.0]]));
        let a = t.segment_softmax(s, &[0, 1, 0, 2]).unwrap();
        let v = t.value(a).data().to_vec();
        assert!((v[0] + v[2] - 1.0).abs() < 1e-15);
        assert_eq!(v[1], 1.0);
        assert_eq!(v[3], 1.0);
    }

    #[test]
    fn non_finite_results_are_rejected() {
        let mut t = Tape::new();
        let a = t.constant(Matrix::from_rows(&[[f64::MAX]]));
        let b = t.constant(Matrix::from_rows(&[[f64::MAX]]));
        assert_eq!(
            t.add(a, b).unwrap_err(),
            TensorError::NonFinite { op: "add" }
        );
    }
}
