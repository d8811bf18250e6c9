//! Reverse-mode differentiation over [`Tensor4`] values.
//!
//! A [`Tape`] records each executed op together with its output. Calling
//! [`Tape::backward`] on a scalar walks the record in reverse and returns one
//! gradient per node that depends on a `requires_grad` leaf.

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::simam;
use crate::tensor::{
    self, batch_norm_backward, batch_norm_eval, batch_norm_train, conv2d, conv2d_backward, elementwise, sigmoid,
    BatchNormCache, ConvParams, ElementwiseOp, Shape4, Tensor4,
};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Process-unique identity of a trainable tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn fresh() -> Self {
        static NEXT: AtomicUsize = AtomicUsize::new(0);
        ParamId(NEXT.fetch_add(1, Ordering::Relaxed))
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary(Var, ElementwiseOp),
    Binary(Var, Var, ElementwiseOp),
    AddScalar(Var),
    MulScalar(Var, f64),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        params: ConvParams,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: BatchNormCache,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GlobalAvgPool(Var),
    ScaleChannels {
        x: Var,
        gate: Var,
    },
    SimAm {
        x: Var,
        lambda: f64,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor4,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor4,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(ParamId, Var)>,
}

/// Output of a training-mode batch norm: the normalized value plus the batch
/// statistics the caller folds into its running estimates.
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (divisor `N·H·W`) batch variance.
    pub var: Vec<f64>,
    pub count: usize,
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

    pub fn value(&self, v: Var) -> &Tensor4 {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape4 {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor4, op: Op, requires_grad: bool) -> Var {
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

    /// Records a leaf; it is differentiated iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor4) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    /// Records a constant leaf regardless of its flag.
    pub fn constant(&mut self, mut t: Tensor4) -> Var {
        t.set_requires_grad(false);
        self.push(t, Op::Leaf, false)
    }

    /// Records a trainable tensor; its gradient is retrievable by `id`.
    pub fn param(&mut self, id: ParamId, value: &Tensor4) -> Var {
        let v = self.push(value.clone(), Op::Leaf, true);
        self.params.push((id, v));
        v
    }

    pub fn unary(&mut self, kind: ElementwiseOp, x: Var) -> Result<Var> {
        let y = elementwise(kind, self.value(x), None)?;
        let rg = self.rg(x);
        Ok(self.push(y, Op::Unary(x, kind), rg))
    }

    pub fn binary(&mut self, kind: ElementwiseOp, a: Var, b: Var) -> Result<Var> {
        let y = elementwise(kind, self.value(a), Some(self.value(b)))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::Binary(a, b, kind), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseOp::Add, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseOp::Mul, a, b)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(ElementwiseOp::Sigmoid, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(ElementwiseOp::Relu, x)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary(ElementwiseOp::Silu, x)
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Var {
        let y = self.value(x).add_scalar(k);
        let rg = self.rg(x);
        self.push(y, Op::AddScalar(x), rg)
    }

    pub fn mul_scalar(&mut self, x: Var, k: f64) -> Var {
        let y = self.value(x).scale(k);
        let rg = self.rg(x);
        self.push(y, Op::MulScalar(x, k), rg)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, params: ConvParams) -> Result<Var> {
        let y = conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), params)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(y, Op::Conv { x, w, b, params }, rg))
    }

    /// `x` is `N×in×1×1`, `w` is `out×in×1×1`, `b` is `1×out×1×1`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        if self.shape(x).plane() != 1 {
            return Err(Error::invalid(format!("linear expects N×F×1×1 input, got {}", self.shape(x))));
        }
        self.conv2d(x, w, b, ConvParams::default())
    }

    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let (y, cache) = batch_norm_train(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let s = self.shape(x);
        let stats = BatchStats {
            mean: cache.mean.clone(),
            var: cache.var.clone(),
            count: s.n * s.plane(),
        };
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(y, Op::BatchNormTrain { x, gamma, beta, cache }, rg);
        Ok((v, stats))
    }

    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let y = batch_norm_eval(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            running_mean,
            running_var,
            eps,
        )?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let op = Op::BatchNormEval {
            x,
            gamma,
            beta,
            mean: running_mean.to_vec(),
            inv_std: running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect(),
        };
        Ok(self.push(y, op, rg))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let y = tensor::global_avg_pool(self.value(x));
        let rg = self.rg(x);
        self.push(y, Op::GlobalAvgPool(x), rg)
    }

    /// Multiplies every spatial position of channel `c` by `gate[n, c]`.
    pub fn scale_channels(&mut self, x: Var, gate: Var) -> Result<Var> {
        let xs = self.shape(x);
        let gs = self.shape(gate);
        if gs != Shape4::new(xs.n, xs.c, 1, 1) {
            return Err(Error::ShapeMismatch {
                op: "scale_channels",
                lhs: xs,
                rhs: gs,
            });
        }
        let mut y = self.value(x).clone();
        y.set_requires_grad(false);
        let g = self.value(gate).data().to_vec();
        for n in 0..xs.n {
            for c in 0..xs.c {
                let k = g[n * xs.c + c];
                y.plane_mut(n, c).iter_mut().for_each(|v| *v *= k);
            }
        }
        let rg = self.rg(x) || self.rg(gate);
        Ok(self.push(y, Op::ScaleChannels { x, gate }, rg))
    }

    /// Parameter-free 3-D attention; see [`crate::simam::simam_refine`].
    pub fn simam(&mut self, x: Var, lambda: f64) -> Result<Var> {
        let y = simam::simam_refine(self.value(x), &simam::EnergyParams::new(lambda)?)?;
        let rg = self.rg(x);
        Ok(self.push(y, Op::SimAm { x, lambda }, rg))
    }

    /// Mean softmax cross-entropy over the batch, as a `1×1×1×1` value.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let loss = tensor::cross_entropy(self.value(logits), labels)?;
        let probs = tensor::softmax(self.value(logits))?;
        let rg = self.rg(logits);
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(Tensor4::scalar(loss), op, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor4::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(y, Op::Sum(x), rg)
    }

    /// Propagates `d loss / d node` back through the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ls = self.shape(loss);
        if ls.numel() != 1 {
            return Err(Error::invalid(format!("backward needs a scalar loss, got {ls}")));
        }
        let mut grads: Vec<Option<Tensor4>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor4::ones(ls));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            let mut out: Vec<(Var, Tensor4)> = Vec::with_capacity(3);
            let mut acc = |v: Var, g: Tensor4| out.push((v, g));
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(gy);
                }
                Op::Unary(x, kind) => {
                    let xv = self.value(*x);
                    let g = match kind {
                        ElementwiseOp::Neg => gy.scale(-1.0),
                        ElementwiseOp::Sigmoid => {
                            node.value.zip_map(&gy, "sigmoid'", |s, g| g * s * (1.0 - s))?
                        }
                        ElementwiseOp::Relu => xv.zip_map(&gy, "relu'", |x, g| if x > 0.0 { g } else { 0.0 })?,
                        ElementwiseOp::Silu => xv.zip_map(&gy, "silu'", |x, g| {
                            let s = sigmoid(x);
                            g * s * (1.0 + x * (1.0 - s))
                        })?,
                        _ => unreachable!(),
                    };
                    acc(*x, g);
                }
                Op::Binary(a, b, kind) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (ga, gb) = match kind {
                        ElementwiseOp::Add => (gy.clone(), gy),
                        ElementwiseOp::Sub => (gy.clone(), gy.scale(-1.0)),
                        ElementwiseOp::Mul => (gy.zip_map(bv, "mul'", |g, b| g * b)?, gy.zip_map(av, "mul'", |g, a| g * a)?),
                        ElementwiseOp::Div => {
                            let ga = gy.zip_map(bv, "div'", |g, b| g / b)?;
                            let gb = ga.zip_map(&node.value, "div'", |ga, y| -ga * y)?;
                            (ga, gb)
                        }
                        _ => unreachable!(),
                    };
                    acc(*a, ga);
                    acc(*b, gb);
                }
                Op::AddScalar(x) => acc(*x, gy),
                Op::MulScalar(x, k) => acc(*x, gy.scale(*k)),
                Op::Conv { x, w, b, params } => {
                    let (gx, gw, gb) = conv2d_backward(self.value(*x), self.value(*w), &gy, *params)?;
                    acc(*x, gx);
                    acc(*w, gw);
                    if let Some(b) = b {
                        acc(*b, gb);
                    }
                }
                Op::BatchNormTrain { x, gamma, beta, cache } => {
                    let (gx, gg, gb) = batch_norm_backward(&gy, self.value(*gamma), cache);
                    acc(*x, gx);
                    acc(*gamma, gg);
                    acc(*beta, gb);
                }
                Op::BatchNormEval {
                    x,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                } => {
                    let s = gy.shape();
                    let gamma_v = self.value(*gamma).data();
                    let xv = self.value(*x);
                    let mut gx = Tensor4::zeros(s);
                    let mut gg = Tensor4::zeros(Shape4::new(1, s.c, 1, 1));
                    let mut gb = Tensor4::zeros(Shape4::new(1, s.c, 1, 1));
                    for n in 0..s.n {
                        for c in 0..s.c {
                            let k = gamma_v[c] * inv_std[c];
                            let (mut sg, mut sgx) = (0.0, 0.0);
                            for ((d, &g), &q) in gx.plane_mut(n, c).iter_mut().zip(gy.plane(n, c)).zip(xv.plane(n, c)) {
                                *d = g * k;
                                sg += g;
                                sgx += g * (q - mean[c]) * inv_std[c];
                            }
                            gg.data_mut()[c] += sgx;
                            gb.data_mut()[c] += sg;
                        }
                    }
                    acc(*x, gx);
                    acc(*gamma, gg);
                    acc(*beta, gb);
                }
                Op::GlobalAvgPool(x) => {
                    let s = self.shape(*x);
                    let m = s.plane() as f64;
                    let g = Tensor4::from_fn(s, |n, c, _, _| gy.data()[n * s.c + c] / m);
                    acc(*x, g);
                }
                Op::ScaleChannels { x, gate } => {
                    let s = self.shape(*x);
                    let xv = self.value(*x);
                    let gv = self.value(*gate).data();
                    let mut gx = Tensor4::zeros(s);
                    let mut gg = Tensor4::zeros(Shape4::new(s.n, s.c, 1, 1));
                    for n in 0..s.n {
                        for c in 0..s.c {
                            let k = gv[n * s.c + c];
                            let mut dot = 0.0;
                            for ((d, &g), &q) in gx.plane_mut(n, c).iter_mut().zip(gy.plane(n, c)).zip(xv.plane(n, c)) {
                                *d = g * k;
                                dot += g * q;
                            }
                            gg.data_mut()[n * s.c + c] = dot;
                        }
                    }
                    acc(*x, gx);
                    acc(*gate, gg);
                }
                Op::SimAm { x, lambda } => {
                    acc(*x, simam::simam_backward(self.value(*x), &gy, *lambda)?);
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let s = probs.shape();
                    let scale = gy.data()[0] / s.n as f64;
                    let mut g = probs.scale(scale);
                    for (n, &y) in labels.iter().enumerate() {
                        g.data_mut()[n * s.c + y] -= scale;
                    }
                    acc(*logits, g);
                }
                Op::Sum(x) => {
                    let g = Tensor4::full(self.shape(*x), gy.data()[0]);
                    acc(*x, g);
                }
            }
            for (v, g) in out {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        // Non-leaf gradients were consumed on the way down; leaves kept theirs.
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }
}

/// Gradients of one scalar with respect to the tape's `requires_grad` leaves.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor4>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of a leaf; `None` if it does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor4> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a parameter, summed over every place it was recorded.
    pub fn param(&self, id: ParamId) -> Option<Tensor4> {
        let mut out: Option<Tensor4> = None;
        for (pid, v) in &self.params {
            if *pid != id {
                continue;
            }
            if let Some(g) = self.get(*v) {
                match &mut out {
                    Some(o) => o.add_assign(g),
                    None => out = Some(g.clone()),
                }
            }
        }
        out
    }
}
