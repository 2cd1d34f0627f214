//! Dense f64 tensors and a tape-based reverse-mode autodiff engine.
//!
//! Every tensor is stored row-major. Operations work on rank-2 views: a
//! shape `[n]` is treated as a single row `1×n` and a scalar as `1×1`.
//! Operations are recorded on a [`Tape`]; [`Tape::backward`] replays the
//! recorded rules in reverse order and accumulates gradients into leaves.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("tensor shape {shape:?} needs {expected} values, got {got}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite loss {value}; first non-finite value produced by `{op}` (node {node})")]
    NonFiniteLoss {
        value: f64,
        op: &'static str,
        node: usize,
    },
    #[error("{op}: NaN in input")]
    NanInput { op: &'static str },
    #[error("{op}: row {row} has no unmasked entries")]
    EmptyMaskRow { op: &'static str, row: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// A dense row-major array of `f64`.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}{:?}", self.shape, self.data)
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    /// A `1×n` row vector.
    pub fn row(values: &[f64]) -> Self {
        Self {
            shape: vec![1, values.len()],
            data: values.to_vec(),
        }
    }

    /// A matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "from_rows",
                    left: vec![cols],
                    right: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of the rank-2 view.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    /// Columns of the rank-2 view.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            n => self.shape[n - 1],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                got: self.data.len(),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

fn gelu_grad(x: f64) -> f64 {
    normal_cdf(x) + x * normal_pdf(x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`
fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[m×k] += g[m×n] · b[k×n]ᵀ`
fn gemm_nt(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let dot: f64 = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
            out[i * k + p] += dot;
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · g[m×n]`
fn gemm_tn(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += aip * gv;
            }
        }
    }
}

/// Plain matrix product of two rank-2 tensors, outside any tape.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols() != b.rows() {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    gemm_nn(&a.data, &b.data, &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryOp {
    Neg,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Gelu,
    Relu,
    LeakyRelu(f64),
    Scale(f64),
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary {
        kind: BinaryOp,
        a: Var,
        b: Var,
        broadcast: bool,
    },
    Unary {
        kind: UnaryOp,
        a: Var,
    },
    Softmax {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout {
        a: Var,
        scale_mask: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Transpose(Var),
    Reshape(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Mse(Var, Var),
    SmoothL1(Var, Var, f64),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Binary { kind, .. } => match kind {
                BinaryOp::Add => "add",
                BinaryOp::Sub => "sub",
                BinaryOp::Mul => "mul",
                BinaryOp::Div => "div",
            },
            Op::Unary { kind, .. } => match kind {
                UnaryOp::Neg => "neg",
                UnaryOp::Exp => "exp",
                UnaryOp::Log => "log",
                UnaryOp::Tanh => "tanh",
                UnaryOp::Sigmoid => "sigmoid",
                UnaryOp::Gelu => "gelu",
                UnaryOp::Relu => "relu",
                UnaryOp::LeakyRelu(_) => "leaky_relu",
                UnaryOp::Scale(_) => "scale",
            },
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Dropout { .. } => "dropout",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::MeanRows(_) => "mean_rows",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::Mse(..) => "mse",
            Op::SmoothL1(..) => "smooth_l1",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Persistent accumulator, only kept for leaves.
    grad: Option<Vec<f64>>,
}

/// An ordered record of executed operations.
///
/// Nodes are appended in execution order, so every node's inputs precede it.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if `backward` has reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad.as_ref().map(|g| Tensor {
            shape: node.value.shape.clone(),
            data: g.clone(),
        })
    }

    /// Resets every leaf gradient.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            left: self.shape(a).to_vec(),
            right: self.shape(b).to_vec(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul(self.value(a), self.value(b)).map_err(|_| self.mismatch("matmul", a, b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// Elementwise binary op. `b` may have the same shape as `a`, or be a
    /// single row of matching width, broadcast over the rows of `a`.
    pub fn binary(&mut self, kind: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let broadcast = if av.shape == bv.shape {
            false
        } else if bv.rows() == 1 && bv.cols() == av.cols() && bv.len() == av.cols() {
            true
        } else {
            return Err(self.mismatch("binary", a, b));
        };
        let cols = av.cols();
        let f = |x: f64, y: f64| match kind {
            BinaryOp::Add => x + y,
            BinaryOp::Sub => x - y,
            BinaryOp::Mul => x * y,
            BinaryOp::Div => x / y,
        };
        let data = av
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = if broadcast { bv.data[i % cols] } else { bv.data[i] };
                f(x, y)
            })
            .collect();
        let out = Tensor {
            shape: av.shape.clone(),
            data,
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Binary { kind, a, b, broadcast }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn unary(&mut self, kind: UnaryOp, a: Var) -> Var {
        let f = |x: f64| match kind {
            UnaryOp::Neg => -x,
            UnaryOp::Exp => x.exp(),
            UnaryOp::Log => x.ln(),
            UnaryOp::Tanh => x.tanh(),
            UnaryOp::Sigmoid => sigmoid(x),
            UnaryOp::Gelu => gelu(x),
            UnaryOp::Relu => x.max(0.0),
            UnaryOp::LeakyRelu(s) => {
                if x > 0.0 {
                    x
                } else {
                    s * x
                }
            }
            UnaryOp::Scale(c) => c * x,
        };
        let av = self.value(a);
        let out = Tensor {
            shape: av.shape.clone(),
            data: av.data.iter().map(|&x| f(x)).collect(),
        };
        let rg = self.rg(a);
        self.push(out, Op::Unary { kind, a }, rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Neg, a)
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Exp, a)
    }
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Log, a)
    }
    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Tanh, a)
    }
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Sigmoid, a)
    }
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Gelu, a)
    }
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Relu, a)
    }
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(UnaryOp::LeakyRelu(slope), a)
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(UnaryOp::Scale(c), a)
    }

    /// Softmax along `axis` (0 = down columns, 1 = across rows) with max
    /// subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        match axis {
            1 => self.masked_softmax(a, None),
            0 => {
                let t = self.transpose(a);
                let s = self.masked_softmax(t, None)?;
                Ok(self.transpose(s))
            }
            _ => Err(TensorError::InvalidArgument(format!(
                "softmax axis {axis} (rank-2 views only have axes 0 and 1)"
            ))),
        }
    }

    /// Row softmax restricted to entries where `mask` is true. Masked
    /// entries get probability exactly zero. Every row needs at least one
    /// unmasked entry.
    pub fn masked_softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let av = self.value(a);
        if av.data.iter().any(|v| v.is_nan()) {
            return Err(TensorError::NanInput { op: "softmax" });
        }
        if let Some(m) = mask {
            if m.len() != av.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "masked_softmax",
                    left: av.shape.clone(),
                    right: vec![m.len()],
                });
            }
        }
        let (rows, cols) = (av.rows(), av.cols());
        let mut data = vec![0.0; av.len()];
        for r in 0..rows {
            let keep = |c: usize| mask.map_or(true, |m| m[r * cols + c]);
            let mut max = f64::NEG_INFINITY;
            for c in 0..cols {
                if keep(c) {
                    max = max.max(av.data[r * cols + c]);
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(TensorError::EmptyMaskRow { op: "softmax", row: r });
            }
            let mut total = 0.0;
            for c in 0..cols {
                if keep(c) {
                    let e = (av.data[r * cols + c] - max).exp();
                    data[r * cols + c] = e;
                    total += e;
                }
            }
            for v in &mut data[r * cols..(r + 1) * cols] {
                *v /= total;
            }
        }
        let out = Tensor {
            shape: av.shape.clone(),
            data,
        };
        let rg = self.rg(a);
        Ok(self.push(out, Op::Softmax { a }, rg))
    }

    /// Layer normalization over the last axis with population variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(TensorError::InvalidArgument(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let xv = self.value(x);
        let cols = xv.cols();
        if self.value(gain).len() != cols {
            return Err(self.mismatch("layer_norm gain", x, gain));
        }
        if self.value(bias).len() != cols {
            return Err(self.mismatch("layer_norm bias", x, bias));
        }
        let (g, b) = (&self.value(gain).data, &self.value(bias).data);
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut data = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv.data[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat[r * cols + c] = h;
                data[r * cols + c] = h * g[c] + b[c];
            }
        }
        let out = Tensor {
            shape: xv.shape.clone(),
            data,
        };
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Inverted dropout. In eval mode, or with `rate == 0`, this is the
    /// identity and consumes no randomness.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, rng: &mut R, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidArgument(format!("dropout rate must be in [0, 1), got {rate}")));
        }
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let n = self.value(a).len();
        let scale_mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep_scale })
            .collect();
        let av = self.value(a);
        let out = Tensor {
            shape: av.shape.clone(),
            data: av.data.iter().zip(&scale_mask).map(|(x, m)| x * m).collect(),
        };
        let rg = self.rg(a);
        Ok(self.push(out, Op::Dropout { a, scale_mask }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let s = av.sum() / av.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Column means, `m×n → 1×n`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (rows, cols) = (av.rows(), av.cols());
        let mut data = vec![0.0; cols];
        for r in 0..rows {
            for (d, v) in data.iter_mut().zip(av.row_slice(r)) {
                *d += v;
            }
        }
        for d in &mut data {
            *d /= rows as f64;
        }
        let rg = self.rg(a);
        self.push(Tensor::row(&data), Op::MeanRows(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (rows, cols) = (av.rows(), av.cols());
        let mut data = vec![0.0; av.len()];
        for r in 0..rows {
            for c in 0..cols {
                data[c * rows + r] = av.data[r * cols + c];
            }
        }
        let rg = self.rg(a);
        self.push(
            Tensor {
                shape: vec![cols, rows],
                data,
            },
            Op::Transpose(a),
            rg,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Concatenates rank-2 views with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::InvalidArgument("concat_cols of nothing".into()))?;
        let rows = self.value(first).rows();
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(self.mismatch("concat_cols", first, p));
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor {
                shape: vec![rows, total],
                data,
            },
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Stacks rank-2 views with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::InvalidArgument("concat_rows of nothing".into()))?;
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(self.mismatch("concat_rows", first, p));
            }
            rows += v.rows();
            data.extend_from_slice(&v.data);
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor {
                shape: vec![rows, cols],
                data,
            },
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    /// Columns `start..end` of the rank-2 view.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        if start >= end || end > av.cols() {
            return Err(TensorError::InvalidArgument(format!(
                "slice_cols {start}..{end} out of range for shape {:?}",
                av.shape
            )));
        }
        let rows = av.rows();
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&av.row_slice(r)[start..end]);
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor {
                shape: vec![rows, end - start],
                data,
            },
            Op::SliceCols(a, start),
            rg,
        ))
    }

    /// Rows `start..end` of the rank-2 view.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        if start >= end || end > av.rows() {
            return Err(TensorError::InvalidArgument(format!(
                "slice_rows {start}..{end} out of range for shape {:?}",
                av.shape
            )));
        }
        let cols = av.cols();
        let data = av.data[start * cols..end * cols].to_vec();
        let rg = self.rg(a);
        Ok(self.push(
            Tensor {
                shape: vec![end - start, cols],
                data,
            },
            Op::SliceRows(a, start),
            rg,
        ))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape != t.shape {
            return Err(self.mismatch("mse", pred, target));
        }
        let s: f64 = p.data.iter().zip(&t.data).map(|(a, b)| (a - b) * (a - b)).sum();
        let out = Tensor::scalar(s / p.len() as f64);
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(out, Op::Mse(pred, target), rg))
    }

    /// Smooth-L1 (Huber) loss averaged over all elements.
    pub fn smooth_l1(&mut self, pred: Var, target: Var, beta: f64) -> Result<Var> {
        if beta <= 0.0 {
            return Err(TensorError::InvalidArgument(format!("smooth_l1 beta must be > 0, got {beta}")));
        }
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape != t.shape {
            return Err(self.mismatch("smooth_l1", pred, target));
        }
        let s: f64 = p
            .data
            .iter()
            .zip(&t.data)
            .map(|(a, b)| {
                let d = (a - b).abs();
                if d < beta {
                    0.5 * d * d / beta
                } else {
                    d - 0.5 * beta
                }
            })
            .sum();
        let out = Tensor::scalar(s / p.len() as f64);
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(out, Op::SmoothL1(pred, target, beta), rg))
    }

    /// Propagates `∂loss/∂·` to every reachable `requires_grad` leaf, adding
    /// to whatever the leaves already hold.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape.clone()));
        }
        let value = lv.data[0];
        if !value.is_finite() {
            let node = self
                .nodes
                .iter()
                .position(|n| !n.value.is_finite())
                .unwrap_or(loss.0);
            return Err(TensorError::NonFiniteLoss {
                value,
                op: self.nodes[node].op.name(),
                node,
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        // Lazily allocates the input's accumulator and hands it back.
        fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut Vec<f64>> {
            if !nodes[v.0].requires_grad {
                return None;
            }
            let n = nodes[v.0].value.len();
            Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
        }
        let nodes = &self.nodes;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if let Some(ga) = slot(grads, nodes, *a) {
                    gemm_nt(g, &bv.data, ga, m, k, n);
                }
                if let Some(gb) = slot(grads, nodes, *b) {
                    gemm_tn(&av.data, g, gb, m, k, n);
                }
            }
            Op::Binary { kind, a, b, broadcast } => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let cols = av.cols();
                let bidx = |j: usize| if *broadcast { j % cols } else { j };
                if let Some(ga) = slot(grads, nodes, *a) {
                    for (j, gj) in g.iter().enumerate() {
                        ga[j] += match kind {
                            BinaryOp::Add | BinaryOp::Sub => *gj,
                            BinaryOp::Mul => gj * bv.data[bidx(j)],
                            BinaryOp::Div => gj / bv.data[bidx(j)],
                        };
                    }
                }
                if let Some(gb) = slot(grads, nodes, *b) {
                    for (j, gj) in g.iter().enumerate() {
                        let y = bv.data[bidx(j)];
                        gb[bidx(j)] += match kind {
                            BinaryOp::Add => *gj,
                            BinaryOp::Sub => -gj,
                            BinaryOp::Mul => gj * av.data[j],
                            BinaryOp::Div => -gj * av.data[j] / (y * y),
                        };
                    }
                }
            }
            Op::Unary { kind, a } => {
                let x = &nodes[a.0].value.data;
                if let Some(ga) = slot(grads, nodes, *a) {
                    for (j, gj) in g.iter().enumerate() {
                        let y = out.data[j];
                        ga[j] += gj
                            * match kind {
                                UnaryOp::Neg => -1.0,
                                UnaryOp::Exp => y,
                                UnaryOp::Log => 1.0 / x[j],
                                UnaryOp::Tanh => 1.0 - y * y,
                                UnaryOp::Sigmoid => y * (1.0 - y),
                                UnaryOp::Gelu => gelu_grad(x[j]),
                                UnaryOp::Relu => {
                                    if x[j] > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                                UnaryOp::LeakyRelu(s) => {
                                    if x[j] > 0.0 {
                                        1.0
                                    } else {
                                        *s
                                    }
                                }
                                UnaryOp::Scale(c) => *c,
                            };
                    }
                }
            }
            Op::Softmax { a } => {
                if let Some(ga) = slot(grads, nodes, *a) {
                    let (rows, cols) = (out.rows(), out.cols());
                    for r in 0..rows {
                        let y = &out.data[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            ga[r * cols + c] += y[c] * (gr[c] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let cols = out.cols();
                let rows = out.rows();
                let gv = &nodes[gain.0].value.data;
                if let Some(gx) = slot(grads, nodes, *x) {
                    let n = cols as f64;
                    for r in 0..rows {
                        let base = r * cols;
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for c in 0..cols {
                            let d = g[base + c] * gv[c];
                            sum_d += d;
                            sum_dx += d * xhat[base + c];
                        }
                        for c in 0..cols {
                            let d = g[base + c] * gv[c];
                            gx[base + c] += inv_std[r] / n * (n * d - sum_d - xhat[base + c] * sum_dx);
                        }
                    }
                }
                if let Some(gg) = slot(grads, nodes, *gain) {
                    for r in 0..rows {
                        for c in 0..cols {
                            gg[c] += g[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                }
                if let Some(gb) = slot(grads, nodes, *bias) {
                    for r in 0..rows {
                        for c in 0..cols {
                            gb[c] += g[r * cols + c];
                        }
                    }
                }
            }
            Op::Dropout { a, scale_mask } => {
                if let Some(ga) = slot(grads, nodes, *a) {
                    for (j, gj) in g.iter().enumerate() {
                        ga[j] += gj * scale_mask[j];
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = slot(grads, nodes, *a) {
                    ga.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = slot(grads, nodes, *a) {
                    let s = g[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|v| *v += s);
                }
            }
            Op::MeanRows(a) => {
                if let Some(ga) = slot(grads, nodes, *a) {
                    let av = &nodes[a.0].value;
                    let (rows, cols) = (av.rows(), av.cols());
                    for r in 0..rows {
                        for c in 0..cols {
                            ga[r * cols + c] += g[c] / rows as f64;
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                if let Some(ga) = slot(grads, nodes, *a) {
                    // out is cols×rows of the input
                    let (orows, ocols) = (out.rows(), out.cols());
                    for r in 0..orows {
                        for c in 0..ocols {
                            ga[c * orows + r] += g[r * ocols + c];
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = slot(grads, nodes, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = (out.rows(), out.cols());
                let mut offset = 0;
                for p in parts {
                    let pc = nodes[p.0].value.cols();
                    if let Some(gp) = slot(grads, nodes, *p) {
                        for r in 0..rows {
                            for c in 0..pc {
                                gp[r * pc + c] += g[r * total + offset + c];
                            }
                        }
                    }
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = nodes[p.0].value.len();
                    if let Some(gp) = slot(grads, nodes, *p) {
                        gp.iter_mut().zip(&g[offset..offset + n]).for_each(|(x, y)| *x += y);
                    }
                    offset += n;
                }
            }
            Op::SliceCols(a, start) => {
                if let Some(ga) = slot(grads, nodes, *a) {
                    let acols = nodes[a.0].value.cols();
                    let (rows, cols) = (out.rows(), out.cols());
                    for r in 0..rows {
                        for c in 0..cols {
                            ga[r * acols + start + c] += g[r * cols + c];
                        }
                    }
                }
            }
            Op::SliceRows(a, start) => {
                if let Some(ga) = slot(grads, nodes, *a) {
                    let off = start * out.cols();
                    ga[off..off + g.len()].iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Mse(p, t) => {
                let (pv, tv) = (&nodes[p.0].value.data, &nodes[t.0].value.data);
                let s = 2.0 * g[0] / pv.len() as f64;
                if let Some(gp) = slot(grads, nodes, *p) {
                    for j in 0..pv.len() {
                        gp[j] += s * (pv[j] - tv[j]);
                    }
                }
                if let Some(gt) = slot(grads, nodes, *t) {
                    for j in 0..pv.len() {
                        gt[j] -= s * (pv[j] - tv[j]);
                    }
                }
            }
            Op::SmoothL1(p, t, beta) => {
                let (pv, tv) = (&nodes[p.0].value.data, &nodes[t.0].value.data);
                let s = g[0] / pv.len() as f64;
                let dl = |d: f64| if d.abs() < *beta { d / beta } else { d.signum() };
                if let Some(gp) = slot(grads, nodes, *p) {
                    for j in 0..pv.len() {
                        gp[j] += s * dl(pv[j] - tv[j]);
                    }
                }
                if let Some(gt) = slot(grads, nodes, *t) {
                    for j in 0..pv.len() {
                        gt[j] -= s * dl(pv[j] - tv[j]);
                    }
                }
            }
        }
    }
}
