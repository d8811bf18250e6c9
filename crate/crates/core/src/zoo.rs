//! Channel attention: a runnable squeeze-and-excitation layer and parameter
//! formulas for the common attention modules.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Linear, Module, Param};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttentionKind {
    Cbam,
    Se,
    Gc,
    Srm,
    Eca,
    SimAm,
}

impl AttentionKind {
    pub const ALL: [AttentionKind; 6] = [Self::Cbam, Self::Se, Self::Gc, Self::Srm, Self::Eca, Self::SimAm];

    pub fn name(self) -> &'static str {
        match self {
            Self::Cbam => "CBAM",
            Self::Se => "SE",
            Self::Gc => "GC",
            Self::Srm => "SRM",
            Self::Eca => "ECA",
            Self::SimAm => "SimAM",
        }
    }

    pub fn operators(self) -> &'static str {
        match self {
            Self::Cbam => "C2D, GAP, GMP, FC, ReLU, CAP, CMP, BN",
            Self::Se => "GAP, FC, ReLU",
            Self::Gc => "C1D, Softmax, LN, FC, ReLU",
            Self::Srm => "GAP, GSP, CFC, BN",
            Self::Eca => "GAP, C1D",
            Self::SimAm => "GAP, /, ·, +",
        }
    }

    pub fn formula(self) -> &'static str {
        match self {
            Self::Cbam => "2C^2/r + 2K^2",
            Self::Se => "2C^2/r",
            Self::Gc => "2C^2/r + C",
            Self::Srm => "6C",
            Self::Eca => "K",
            Self::SimAm => "0",
        }
    }
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown attention module '{s}'")))
    }
}

/// Inputs to the parameter formulas: channels `C`, reduction ratio `r`,
/// kernel/filter count `K`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionCostSpec {
    pub kind: AttentionKind,
    pub channels: u64,
    pub reduction: u64,
    pub kernel: u64,
}

impl AttentionCostSpec {
    pub fn new(kind: AttentionKind, channels: u64, reduction: u64, kernel: u64) -> Self {
        AttentionCostSpec {
            kind,
            channels,
            reduction,
            kernel,
        }
    }

    fn validate(&self) -> Result<()> {
        use AttentionKind::*;
        let uses_reduction = matches!(self.kind, Cbam | Se | Gc);
        let uses_kernel = matches!(self.kind, Cbam | Eca);
        let uses_channels = !matches!(self.kind, Eca | SimAm);
        if uses_channels && self.channels == 0 {
            return Err(Error::invalid(format!("{}: C must be ≥ 1", self.kind)));
        }
        if uses_reduction && (self.reduction == 0 || !self.channels.is_multiple_of(self.reduction)) {
            return Err(Error::invalid(format!(
                "{}: r = {} must divide C = {}",
                self.kind, self.reduction, self.channels
            )));
        }
        if uses_kernel && self.kernel.is_multiple_of(2) {
            return Err(Error::invalid(format!("{}: K = {} must be odd and ≥ 1", self.kind, self.kernel)));
        }
        Ok(())
    }
}

/// Trainable parameter count of an attention module (biases excluded).
pub fn param_count(spec: &AttentionCostSpec) -> Result<u64> {
    spec.validate()?;
    let AttentionCostSpec {
        channels: c,
        reduction: r,
        kernel: k,
        ..
    } = *spec;
    Ok(match spec.kind {
        AttentionKind::Cbam => 2 * c * c / r + 2 * k * k,
        AttentionKind::Se => 2 * c * c / r,
        AttentionKind::Gc => 2 * c * c / r + c,
        AttentionKind::Srm => 6 * c,
        AttentionKind::Eca => k,
        AttentionKind::SimAm => 0,
    })
}

/// Squeeze (global average pool) → FC → ReLU → FC → sigmoid → channel scale.
/// Both FC layers are bias-free, so the layer holds exactly `2C²/r` weights.
#[derive(Clone, Debug)]
pub struct SeLayer {
    pub reduce: Linear,
    pub expand: Linear,
}

impl SeLayer {
    /// `channels` squeezed down to `reduced` hidden units.
    pub fn new<R: Rng + ?Sized>(channels: usize, reduced: usize, rng: &mut R) -> Result<Self> {
        if reduced == 0 || !channels.is_multiple_of(reduced) {
            return Err(Error::invalid(format!(
                "SE: hidden width {reduced} must divide {channels} channels"
            )));
        }
        Ok(SeLayer {
            reduce: Linear::new(channels, reduced, false, rng),
            expand: Linear::new(reduced, channels, false, rng),
        })
    }

    /// SE block with reduction ratio `r`; rejects `r` not dividing `channels`.
    pub fn with_ratio<R: Rng + ?Sized>(channels: usize, ratio: usize, rng: &mut R) -> Result<Self> {
        if ratio == 0 || !channels.is_multiple_of(ratio) {
            return Err(Error::invalid(format!(
                "SE: reduction ratio {ratio} does not divide {channels} channels"
            )));
        }
        Self::new(channels, channels / ratio, rng)
    }

    pub fn channels(&self) -> usize {
        self.reduce.in_features()
    }

    pub fn reduced(&self) -> usize {
        self.reduce.out_features()
    }

    pub fn cost_spec(&self) -> AttentionCostSpec {
        AttentionCostSpec::new(
            AttentionKind::Se,
            self.channels() as u64,
            (self.channels() / self.reduced()) as u64,
            1,
        )
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let s = tape.global_avg_pool(x);
        let h = self.reduce.forward(tape, s)?;
        let h = tape.relu(h)?;
        let g = self.expand.forward(tape, h)?;
        let g = tape.sigmoid(g)?;
        tape.scale_channels(x, g)
    }
}

impl Module for SeLayer {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.reduce.visit_params(f);
        self.expand.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.reduce.visit_params_mut(f);
        self.expand.visit_params_mut(f);
    }
}

/// Inference-only SE application on a plain tensor.
pub fn se_forward(x: &Tensor4, layer: &SeLayer) -> Result<Tensor4> {
    if x.shape().c != layer.channels() {
        return Err(Error::invalid(format!(
            "SE layer expects {} channels, input is {}",
            layer.channels(),
            x.shape()
        )));
    }
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let y = layer.forward(&mut tape, v)?;
    Ok(tape.value(y).clone())
}

/// One row of the attention-module comparison for given `C`, `r`, `K`.
#[derive(Clone, Debug, PartialEq)]
pub struct CostRow {
    pub kind: AttentionKind,
    pub operators: &'static str,
    pub formula: &'static str,
    pub params: u64,
}

pub fn cost_table(channels: u64, reduction: u64, kernel: u64) -> Result<Vec<CostRow>> {
    AttentionKind::ALL
        .into_iter()
        .map(|kind| {
            Ok(CostRow {
                kind,
                operators: kind.operators(),
                formula: kind.formula(),
                params: param_count(&AttentionCostSpec::new(kind, channels, reduction, kernel))?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape4;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn count(kind: AttentionKind, c: u64, r: u64, k: u64) -> u64 {
        param_count(&AttentionCostSpec::new(kind, c, r, k)).unwrap()
    }

    #[test]
    fn formula_examples() {
        assert_eq!(count(AttentionKind::Se, 64, 16, 1), 512);
        assert_eq!(count(AttentionKind::Cbam, 64, 16, 7), 610);
        assert_eq!(count(AttentionKind::Eca, 0, 0, 3), 3);
        assert_eq!(count(AttentionKind::Gc, 64, 16, 1), 576);
        assert_eq!(count(AttentionKind::Srm, 64, 16, 1), 384);
        assert_eq!(count(AttentionKind::SimAm, 0, 0, 0), 0);
        assert_eq!(count(AttentionKind::SimAm, 1_000, 7, 4), 0);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(param_count(&AttentionCostSpec::new(AttentionKind::Se, 64, 5, 1)).is_err());
        assert!(param_count(&AttentionCostSpec::new(AttentionKind::Cbam, 64, 16, 4)).is_err());
        assert!(param_count(&AttentionCostSpec::new(AttentionKind::Srm, 0, 1, 1)).is_err());
        assert!("XYZ".parse::<AttentionKind>().is_err());
        assert_eq!("simam".parse::<AttentionKind>().unwrap(), AttentionKind::SimAm);
    }

    #[test]
    fn se_layer_enumeration_matches_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (c, r) in [(64, 16), (16, 4), (256, 4), (48, 4), (192, 24)] {
            let layer = SeLayer::with_ratio(c, r, &mut rng).unwrap();
            assert_eq!(layer.num_params() as u64, param_count(&layer.cost_spec()).unwrap());
        }
        assert!(SeLayer::with_ratio(30, 4, &mut rng).is_err());
    }

    #[test]
    fn zero_weights_halve_the_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut layer = SeLayer::with_ratio(8, 4, &mut rng).unwrap();
        layer.visit_params_mut(&mut |p| p.value.data_mut().fill(0.0));
        let x = Tensor4::from_fn(Shape4::new(2, 8, 3, 3), |n, c, h, w| (n + c * h) as f64 - w as f64);
        let y = se_forward(&x, &layer).unwrap();
        assert_eq!(y, x.scale(0.5));
    }

    #[test]
    fn gate_is_uniform_within_a_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let layer = SeLayer::with_ratio(8, 2, &mut rng).unwrap();
        let x = Tensor4::ones(Shape4::new(1, 8, 4, 4));
        let y = se_forward(&x, &layer).unwrap();
        for c in 0..8 {
            let p = y.plane(0, c);
            assert!(p.iter().all(|&v| v == p[0] && v > 0.0 && v < 1.0));
        }
    }
}
