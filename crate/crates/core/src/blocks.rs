//! Mobile inverted bottleneck (MBConv) blocks.
//!
//! ```text
//! x ─ [1×1 expand, BN, SiLU] ─ k×k depthwise ─ [SimAM] ─ BN, SiLU ─ SE ─ 1×1 project, BN ─(+x)─
//! ```
//!
//! The expansion conv is absent when `expansion == 1`; the residual is used
//! iff `stride == 1` and the channel count is unchanged.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, BatchNorm2d, Conv2d, ConvBnAct, Mode, Module, Param};
use crate::simam::EnergyParams;
use crate::tape::{Tape, Var};
use crate::tensor::{conv_output_size, Tensor4};
use crate::zoo::SeLayer;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MBConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub expansion: usize,
    pub kernel: usize,
    pub stride: usize,
    /// SE hidden width as a fraction of `in_channels`.
    pub se_ratio: f64,
    pub simam_after_dw: bool,
    pub lambda: f64,
}

impl MBConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, expansion: usize, kernel: usize, stride: usize) -> Self {
        MBConvSpec {
            in_channels,
            out_channels,
            expansion,
            kernel,
            stride,
            se_ratio: 0.25,
            simam_after_dw: false,
            lambda: crate::simam::DEFAULT_LAMBDA,
        }
    }

    pub fn with_simam(mut self, lambda: f64) -> Self {
        self.simam_after_dw = true;
        self.lambda = lambda;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(format!("MBConv {}→{}: {m}", self.in_channels, self.out_channels)));
        if self.in_channels == 0 || self.out_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if !matches!(self.expansion, 1 | 6) {
            return bad(format!("expansion must be 1 or 6, got {}", self.expansion));
        }
        if !matches!(self.kernel, 3 | 5) {
            return bad(format!("kernel must be 3 or 5, got {}", self.kernel));
        }
        if !matches!(self.stride, 1 | 2) {
            return bad(format!("stride must be 1 or 2, got {}", self.stride));
        }
        if !(self.se_ratio > 0.0 && self.se_ratio <= 1.0) {
            return bad(format!("se_ratio must be in (0, 1], got {}", self.se_ratio));
        }
        if !self.expanded().is_multiple_of(self.se_hidden()) {
            return bad(format!(
                "SE hidden width {} does not divide {} expanded channels",
                self.se_hidden(),
                self.expanded()
            ));
        }
        if self.simam_after_dw {
            EnergyParams::new(self.lambda)?;
        }
        Ok(())
    }

    pub fn expanded(&self) -> usize {
        self.in_channels * self.expansion
    }

    pub fn se_hidden(&self) -> usize {
        ((self.in_channels as f64 * self.se_ratio) as usize).max(1)
    }

    pub fn has_skip(&self) -> bool {
        self.stride == 1 && self.in_channels == self.out_channels
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let p = self.kernel / 2;
        Some((
            conv_output_size(h, self.kernel, self.stride, p)?,
            conv_output_size(w, self.kernel, self.stride, p)?,
        ))
    }
}

/// Trainable scalars of one block, BN affine terms included; SimAM adds none.
pub fn mbconv_param_count(spec: &MBConvSpec) -> usize {
    let (cin, cexp, cout) = (spec.in_channels, spec.expanded(), spec.out_channels);
    let expand = if spec.expansion == 1 { 0 } else { cin * cexp + 2 * cexp };
    let depthwise = cexp * spec.kernel * spec.kernel + 2 * cexp;
    let se = 2 * cexp * spec.se_hidden();
    let project = cexp * cout + 2 * cout;
    expand + depthwise + se + project
}

/// Work done by one block for an `h×w` input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCount {
    /// Multiply-accumulates of convolution and fully connected layers.
    pub macs: u64,
    /// Elements passed through batch norm.
    pub norm_elems: u64,
    /// Elements passed through activations, SE gating and residual adds.
    pub pointwise_elems: u64,
    /// Elements refined by SimAM.
    pub simam_elems: u64,
}

impl std::ops::AddAssign for OpCount {
    fn add_assign(&mut self, o: Self) {
        self.macs += o.macs;
        self.norm_elems += o.norm_elems;
        self.pointwise_elems += o.pointwise_elems;
        self.simam_elems += o.simam_elems;
    }
}

pub fn mbconv_op_count(spec: &MBConvSpec, h: usize, w: usize) -> Option<OpCount> {
    let (oh, ow) = spec.output_hw(h, w)?;
    let (cin, cexp, cout) = (spec.in_channels as u64, spec.expanded() as u64, spec.out_channels as u64);
    let (in_px, out_px) = ((h * w) as u64, (oh * ow) as u64);
    let k2 = (spec.kernel * spec.kernel) as u64;
    let hidden = spec.se_hidden() as u64;
    let mut c = OpCount::default();
    if spec.expansion != 1 {
        c.macs += in_px * cin * cexp;
        c.norm_elems += in_px * cexp;
        c.pointwise_elems += in_px * cexp;
    }
    c.macs += out_px * cexp * k2;
    c.norm_elems += out_px * cexp;
    c.pointwise_elems += out_px * cexp;
    if spec.simam_after_dw {
        c.simam_elems += out_px * cexp;
    }
    c.macs += 2 * cexp * hidden;
    c.pointwise_elems += hidden + cexp + out_px * cexp;
    c.macs += out_px * cexp * cout;
    c.norm_elems += out_px * cout;
    if spec.has_skip() {
        c.pointwise_elems += out_px * cout;
    }
    Some(c)
}

#[derive(Clone, Debug)]
pub struct MBConv {
    spec: MBConvSpec,
    expand: Option<ConvBnAct>,
    depthwise: Conv2d,
    simam: Option<EnergyParams>,
    dw_bn: BatchNorm2d,
    se: SeLayer,
    project: Conv2d,
    project_bn: BatchNorm2d,
}

impl MBConv {
    pub fn new<R: Rng + ?Sized>(spec: MBConvSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let cexp = spec.expanded();
        let expand = if spec.expansion == 1 {
            None
        } else {
            Some(ConvBnAct {
                conv: Conv2d::new(spec.in_channels, cexp, 1, 1, 1, rng)?,
                bn: BatchNorm2d::new(cexp),
                act: Some(Activation::Silu),
            })
        };
        Ok(MBConv {
            expand,
            depthwise: Conv2d::new(cexp, cexp, spec.kernel, spec.stride, cexp, rng)?,
            simam: if spec.simam_after_dw {
                Some(EnergyParams::new(spec.lambda)?)
            } else {
                None
            },
            dw_bn: BatchNorm2d::new(cexp),
            se: SeLayer::new(cexp, spec.se_hidden(), rng)?,
            project: Conv2d::new(cexp, spec.out_channels, 1, 1, 1, rng)?,
            project_bn: BatchNorm2d::new(spec.out_channels),
            spec,
        })
    }

    pub fn spec(&self) -> &MBConvSpec {
        &self.spec
    }

    /// Changes the attention setting without touching any weights.
    pub fn set_simam(&mut self, lambda: Option<f64>) -> Result<()> {
        self.simam = lambda.map(EnergyParams::new).transpose()?;
        self.spec.simam_after_dw = lambda.is_some();
        if let Some(l) = lambda {
            self.spec.lambda = l;
        }
        Ok(())
    }

    pub fn forward(&mut self, tape: &mut Tape, x: Var, mode: Mode) -> Result<Var> {
        let c = tape.shape(x).c;
        if c != self.spec.in_channels {
            return Err(Error::invalid(format!(
                "MBConv expects {} input channels, got {}",
                self.spec.in_channels, c
            )));
        }
        let mut h = match &mut self.expand {
            Some(e) => e.forward(tape, x, mode)?,
            None => x,
        };
        h = self.depthwise.forward(tape, h)?;
        if let Some(p) = &self.simam {
            h = tape.simam(h, p.lambda())?;
        }
        h = self.dw_bn.forward(tape, h, mode)?;
        h = tape.silu(h)?;
        h = self.se.forward(tape, h)?;
        h = self.project.forward(tape, h)?;
        h = self.project_bn.forward(tape, h, mode)?;
        if self.spec.has_skip() {
            h = tape.add(h, x)?;
        }
        Ok(h)
    }

    /// Runs the block on a plain tensor.
    pub fn apply(&mut self, x: &Tensor4, mode: Mode) -> Result<Tensor4> {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let y = self.forward(&mut tape, v, mode)?;
        Ok(tape.value(y).clone())
    }

    /// Zeroes the projection weights, leaving only the residual path.
    pub fn zero_projection(&mut self) {
        self.project.weight.value.data_mut().fill(0.0);
    }
}

impl Module for MBConv {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        if let Some(e) = &self.expand {
            e.visit_params(f);
        }
        self.depthwise.visit_params(f);
        self.dw_bn.visit_params(f);
        self.se.visit_params(f);
        self.project.visit_params(f);
        self.project_bn.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        if let Some(e) = &mut self.expand {
            e.visit_params_mut(f);
        }
        self.depthwise.visit_params_mut(f);
        self.dw_bn.visit_params_mut(f);
        self.se.visit_params_mut(f);
        self.project.visit_params_mut(f);
        self.project_bn.visit_params_mut(f);
    }

    fn visit_buffers<'a>(&'a self, f: &mut dyn FnMut(&'a Tensor4)) {
        if let Some(e) = &self.expand {
            e.visit_buffers(f);
        }
        self.dw_bn.visit_buffers(f);
        self.project_bn.visit_buffers(f);
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&mut Tensor4)) {
        if let Some(e) = &mut self.expand {
            e.visit_buffers_mut(f);
        }
        self.dw_bn.visit_buffers_mut(f);
        self.project_bn.visit_buffers_mut(f);
    }
}
