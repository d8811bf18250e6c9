//! Dense `N×C×H×W` arrays of `f64` and the pure kernels built on them.
//!
//! Everything here is a function of its inputs; differentiable versions of
//! these kernels are recorded on a [`crate::tape::Tape`].

mod conv;
mod io;
mod norm;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use conv::{conv2d, conv2d_backward, conv_output_size, ConvParams};
pub use io::{read_tensor, read_tensors, write_tensor, write_tensors, DType, MAGIC};
pub use norm::{batch_norm_backward, batch_norm_eval, batch_norm_train, BatchNormCache};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape4 { n, c, h, w }
    }

    pub const fn scalar() -> Self {
        Shape4::new(1, 1, 1, 1)
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Number of spatial positions per channel.
    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub const fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}×{}×{}×{}", self.n, self.c, self.h, self.w)
    }
}

/// Elementwise operation kinds. Binary kinds require equal shapes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Sigmoid,
    Relu,
    Silu,
}

impl ElementwiseOp {
    pub fn is_binary(self) -> bool {
        matches!(self, Self::Add | Self::Sub | Self::Mul | Self::Div)
    }

    fn unary(self, x: f64) -> f64 {
        match self {
            Self::Neg => -x,
            Self::Sigmoid => sigmoid(x),
            Self::Relu => x.max(0.0),
            Self::Silu => x * sigmoid(x),
            _ => unreachable!("binary op applied as unary"),
        }
    }

    fn binary(self, a: f64, b: f64) -> f64 {
        match self {
            Self::Add => a + b,
            Self::Sub => a - b,
            Self::Mul => a * b,
            Self::Div => a / b,
            _ => unreachable!("unary op applied as binary"),
        }
    }
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

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4 {
    shape: Shape4,
    data: Vec<f64>,
    requires_grad: bool,
}

impl Tensor4 {
    pub fn from_vec(shape: Shape4, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::invalid(format!(
                "data length {} does not match shape {shape} ({} elements)",
                data.len(),
                shape.numel()
            )));
        }
        Ok(Tensor4 {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn full(shape: Shape4, value: f64) -> Self {
        Tensor4 {
            shape,
            data: vec![value; shape.numel()],
            requires_grad: false,
        }
    }

    pub fn zeros(shape: Shape4) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: Shape4) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(Shape4::scalar(), value)
    }

    pub fn from_fn(shape: Shape4, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Tensor4 {
            shape,
            data,
            requires_grad: false,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        let s = self.shape;
        ((n * s.c + c) * s.h + h) * s.w + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.index(n, c, h, w)]
    }

    /// Contiguous `H×W` slice of one channel of one batch item.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &mut self.data[start..start + p]
    }

    /// Reinterprets the same data under a new shape with equal element count.
    pub fn reshape(mut self, shape: Shape4) -> Result<Self> {
        if shape.numel() != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&x| f(x)).collect(),
            requires_grad: false,
        }
    }

    pub fn zip_map(&self, other: &Tensor4, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        ensure_same_shape(op, self.shape, other.shape)?;
        Ok(Tensor4 {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            requires_grad: false,
        })
    }

    pub fn add_scalar(&self, k: f64) -> Self {
        self.map(|x| x + k)
    }

    pub fn scale(&self, k: f64) -> Self {
        self.map(|x| x * k)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor4) -> Result<f64> {
        ensure_same_shape("max_abs_diff", self.shape, other.shape)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor4) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

pub(crate) fn ensure_same_shape(op: &'static str, lhs: Shape4, rhs: Shape4) -> Result<()> {
    if lhs != rhs {
        return Err(Error::ShapeMismatch { op, lhs, rhs });
    }
    Ok(())
}

/// Applies `op` entrywise. Binary kinds take `b`; unary kinds must not.
pub fn elementwise(op: ElementwiseOp, a: &Tensor4, b: Option<&Tensor4>) -> Result<Tensor4> {
    match (op.is_binary(), b) {
        (true, Some(b)) => a.zip_map(b, "elementwise", |x, y| op.binary(x, y)),
        (false, None) => Ok(a.map(|x| op.unary(x))),
        (true, None) => Err(Error::invalid(format!("{op:?} needs two operands"))),
        (false, Some(_)) => Err(Error::invalid(format!("{op:?} takes one operand"))),
    }
}

/// Per-(n, c) mean and biased variance (divisor `H·W`).
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelMoments {
    pub shape: Shape4,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl ChannelMoments {
    pub fn mean_at(&self, n: usize, c: usize) -> f64 {
        self.mean[n * self.shape.c + c]
    }

    pub fn var_at(&self, n: usize, c: usize) -> f64 {
        self.var[n * self.shape.c + c]
    }
}

pub fn channel_moments(x: &Tensor4) -> Result<ChannelMoments> {
    let s = x.shape();
    if s.plane() == 0 {
        return Err(Error::invalid("channel_moments needs H·W ≥ 1"));
    }
    let m = s.plane() as f64;
    let mut mean = Vec::with_capacity(s.n * s.c);
    let mut var = Vec::with_capacity(s.n * s.c);
    for n in 0..s.n {
        for c in 0..s.c {
            let plane = x.plane(n, c);
            if plane.iter().all(|&q| q == plane[0]) {
                mean.push(plane[0]);
                var.push(0.0);
                continue;
            }
            let mu = plane.iter().sum::<f64>() / m;
            // two-pass keeps the variance non-negative and exact for constants
            let v = plane.iter().map(|q| (q - mu) * (q - mu)).sum::<f64>() / m;
            mean.push(mu);
            var.push(v);
        }
    }
    Ok(ChannelMoments { shape: s, mean, var })
}

/// Mean over each `H×W` plane, giving `N×C×1×1`.
pub fn global_avg_pool(x: &Tensor4) -> Tensor4 {
    let s = x.shape();
    let m = s.plane() as f64;
    let mut out = Tensor4::zeros(Shape4::new(s.n, s.c, 1, 1));
    for n in 0..s.n {
        for c in 0..s.c {
            out.data[n * s.c + c] = x.plane(n, c).iter().sum::<f64>() / m;
        }
    }
    out
}

/// Row-wise softmax over the channel axis of an `N×K×1×1` tensor.
pub fn softmax(logits: &Tensor4) -> Result<Tensor4> {
    let s = logits.shape();
    if s.plane() != 1 {
        return Err(Error::invalid(format!("softmax expects N×K×1×1, got {s}")));
    }
    let mut out = logits.clone();
    out.requires_grad = false;
    for row in out.data.chunks_mut(s.c) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    Ok(out)
}

/// Mean negative log-likelihood of `labels` under softmax(`logits`).
pub fn cross_entropy(logits: &Tensor4, labels: &[usize]) -> Result<f64> {
    let s = logits.shape();
    check_labels(s, labels)?;
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(n, &y)| {
            let row = &logits.data[n * s.c..(n + 1) * s.c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            lse - row[y]
        })
        .sum();
    Ok(total / s.n as f64)
}

pub(crate) fn check_labels(s: Shape4, labels: &[usize]) -> Result<()> {
    if s.plane() != 1 {
        return Err(Error::invalid(format!("logits must be N×K×1×1, got {s}")));
    }
    if labels.len() != s.n {
        return Err(Error::invalid(format!(
            "{} labels for a batch of {}",
            labels.len(),
            s.n
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= s.c) {
        return Err(Error::invalid(format!("label {bad} out of range for {} classes", s.c)));
    }
    Ok(())
}

/// Index of the largest logit per row; ties resolve to the lowest class index.
pub fn argmax_rows(logits: &Tensor4) -> Vec<usize> {
    let k = logits.shape().c * logits.shape().plane();
    logits
        .data
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
