//! Trainable layers: parameters, convolution, batch norm, linear.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tape::{ParamId, Tape, Var};
use crate::tensor::{ConvParams, Shape4, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Convolution or linear weight; the only kind subject to weight decay.
    Weight,
    Bias,
    NormScale,
    NormShift,
}

#[derive(Clone, Debug)]
pub struct Param {
    id: ParamId,
    pub value: Tensor4,
    pub kind: ParamKind,
}

impl Param {
    pub fn new(value: Tensor4, kind: ParamKind) -> Self {
        Param {
            id: ParamId::fresh(),
            value,
            kind,
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    pub fn record(&self, tape: &mut Tape) -> Var {
        tape.param(self.id, &self.value)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running estimates are updated.
    Train,
    /// Running statistics, no state changes.
    Eval,
}

/// Anything holding trainable parameters and persistent state.
pub trait Module {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param));

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param));

    /// Non-trainable persistent tensors, e.g. running statistics.
    fn visit_buffers_mut(&mut self, _f: &mut dyn FnMut(&mut Tensor4)) {}

    fn visit_buffers<'a>(&'a self, _f: &mut dyn FnMut(&'a Tensor4)) {}

    fn num_params(&self) -> usize {
        let mut total = 0;
        self.visit_params(&mut |p| total += p.numel());
        total
    }

    fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| out.push(p));
        out
    }

    /// Parameters then buffers, in a fixed order; the checkpoint layout.
    fn state(&self) -> Vec<&Tensor4> {
        let mut out: Vec<&Tensor4> = Vec::new();
        self.visit_params(&mut |p| out.push(&p.value));
        self.visit_buffers(&mut |b| out.push(b));
        out
    }

    fn load_state(&mut self, tensors: &[Tensor4]) -> Result<()> {
        let mut it = tensors.iter();
        let mut err = None;
        let mut take = |dst: &mut Tensor4| {
            if err.is_some() {
                return;
            }
            match it.next() {
                Some(src) if src.shape() == dst.shape() => dst.data_mut().copy_from_slice(src.data()),
                Some(src) => {
                    err = Some(Error::Format(format!(
                        "checkpoint tensor {} does not match expected {}",
                        src.shape(),
                        dst.shape()
                    )))
                }
                None => err = Some(Error::Format("checkpoint has too few tensors".into())),
            }
        };
        self.visit_params_mut(&mut |p| take(&mut p.value));
        self.visit_buffers_mut(&mut |b| take(b));
        if let Some(e) = err {
            return Err(e);
        }
        if it.next().is_some() {
            return Err(Error::Format("checkpoint has too many tensors".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Param,
    pub params: ConvParams,
}

impl Conv2d {
    /// Bias-free convolution with "same" padding, He-normal initialized
    /// against fan-out.
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if groups == 0 || !in_channels.is_multiple_of(groups) || !out_channels.is_multiple_of(groups) {
            return Err(Error::invalid(format!(
                "conv {in_channels}→{out_channels} cannot be split into {groups} groups"
            )));
        }
        let shape = Shape4::new(out_channels, in_channels / groups, kernel, kernel);
        let fan_out = (kernel * kernel * out_channels / groups) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_out).sqrt()).expect("finite std");
        let weight = Tensor4::from_fn(shape, |_, _, _, _| normal.sample(rng));
        Ok(Conv2d {
            weight: Param::new(weight, ParamKind::Weight),
            params: ConvParams::same(kernel, stride, groups),
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = self.weight.record(tape);
        tape.conv2d(x, w, None, self.params)
    }
}

impl Module for Conv2d {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.weight);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Tensor4,
    pub running_var: Tensor4,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        let s = Shape4::new(1, channels, 1, 1);
        BatchNorm2d {
            gamma: Param::new(Tensor4::ones(s), ParamKind::NormScale),
            beta: Param::new(Tensor4::zeros(s), ParamKind::NormShift),
            running_mean: Tensor4::zeros(s),
            running_var: Tensor4::ones(s),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&mut self, tape: &mut Tape, x: Var, mode: Mode) -> Result<Var> {
        let g = self.gamma.record(tape);
        let b = self.beta.record(tape);
        match mode {
            Mode::Eval => tape.batch_norm_eval(
                x,
                g,
                b,
                self.running_mean.data(),
                self.running_var.data(),
                self.eps,
            ),
            Mode::Train => {
                let (y, stats) = tape.batch_norm_train(x, g, b, self.eps)?;
                let m = self.momentum;
                let unbias = if stats.count > 1 {
                    stats.count as f64 / (stats.count - 1) as f64
                } else {
                    1.0
                };
                for (r, v) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
                    *r = (1.0 - m) * *r + m * v;
                }
                for (r, v) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
                    *r = (1.0 - m) * *r + m * v * unbias;
                }
                Ok(y)
            }
        }
    }
}

impl Module for BatchNorm2d {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.gamma);
        f(&self.beta);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }

    fn visit_buffers<'a>(&'a self, f: &mut dyn FnMut(&'a Tensor4)) {
        f(&self.running_mean);
        f(&self.running_var);
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&mut Tensor4)) {
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}

/// Fully connected layer on `N×F×1×1` inputs.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(in_features: usize, out_features: usize, bias: bool, rng: &mut R) -> Self {
        let bound = 1.0 / (in_features as f64).sqrt();
        let weight = Tensor4::from_fn(Shape4::new(out_features, in_features, 1, 1), |_, _, _, _| {
            rng.gen_range(-bound..bound)
        });
        let bias = bias.then(|| {
            let b = Tensor4::from_fn(Shape4::new(1, out_features, 1, 1), |_, _, _, _| rng.gen_range(-bound..bound));
            Param::new(b, ParamKind::Bias)
        });
        Linear {
            weight: Param::new(weight, ParamKind::Weight),
            bias,
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.shape().c
    }

    pub fn out_features(&self) -> usize {
        self.weight.value.shape().n
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = self.weight.record(tape);
        let b = self.bias.as_ref().map(|b| b.record(tape));
        tape.linear(x, w, b)
    }
}

impl Module for Linear {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Relu,
}

/// Convolution → batch norm → optional activation.
#[derive(Clone, Debug)]
pub struct ConvBnAct {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub act: Option<Activation>,
}

impl ConvBnAct {
    pub fn forward(&mut self, tape: &mut Tape, x: Var, mode: Mode) -> Result<Var> {
        let y = self.conv.forward(tape, x)?;
        let y = self.bn.forward(tape, y, mode)?;
        match self.act {
            Some(Activation::Silu) => tape.silu(y),
            Some(Activation::Relu) => tape.relu(y),
            None => Ok(y),
        }
    }
}

impl Module for ConvBnAct {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.conv.visit_params(f);
        self.bn.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv.visit_params_mut(f);
        self.bn.visit_params_mut(f);
    }

    fn visit_buffers<'a>(&'a self, f: &mut dyn FnMut(&'a Tensor4)) {
        self.bn.visit_buffers(f);
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&mut Tensor4)) {
        self.bn.visit_buffers_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn running_stats_follow_batches() {
        let mut bn = BatchNorm2d::new(1);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor4::from_vec(Shape4::new(1, 1, 1, 4), vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        bn.forward(&mut tape, x, Mode::Train).unwrap();
        assert!((bn.running_mean.data()[0] - 0.25).abs() < 1e-15);
        // unbiased variance 5/3 folded in with momentum 0.1
        assert!((bn.running_var.data()[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-15);
        let before = bn.running_mean.clone();
        bn.forward(&mut tape, x, Mode::Eval).unwrap();
        assert_eq!(bn.running_mean, before);
    }

    #[test]
    fn state_roundtrip_and_shape_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut a = ConvBnAct {
            conv: Conv2d::new(3, 4, 3, 1, 1, &mut rng).unwrap(),
            bn: BatchNorm2d::new(4),
            act: Some(Activation::Silu),
        };
        let b = ConvBnAct {
            conv: Conv2d::new(3, 4, 3, 1, 1, &mut rng).unwrap(),
            bn: BatchNorm2d::new(4),
            act: Some(Activation::Silu),
        };
        let saved: Vec<Tensor4> = b.state().into_iter().cloned().collect();
        assert_eq!(saved.len(), 5);
        a.load_state(&saved).unwrap();
        assert_eq!(a.conv.weight.value, b.conv.weight.value);
        assert!(a.load_state(&saved[..4]).is_err());
        let mut wrong = saved.clone();
        wrong[0] = Tensor4::zeros(Shape4::new(1, 1, 1, 1));
        assert!(a.load_state(&wrong).is_err());
    }

    #[test]
    fn conv_rejects_bad_groups() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(Conv2d::new(6, 4, 3, 1, 4, &mut rng).is_err());
    }
}
