//! Staged classification networks assembled from a declarative stage table.
//!
//! The table lists, for each stage, its operator, the spatial size of the
//! stage input, the output channel count and the number of layers. The first
//! row must be a plain convolution (the stem), the last a head (convolution,
//! global pooling and a fully connected classifier), and every row between
//! them an MBConv stage. A stage's stride is the ratio between its resolution
//! and the next row's; the last row has stride 1.
//!
//! SimAM insertion points are 1-based `(stage, block)` pairs addressing the
//! MBConv blocks after depth scaling.

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{mbconv_op_count, mbconv_param_count, MBConv, MBConvSpec, OpCount};
use crate::error::{Error, Result};
use crate::nn::{Activation, BatchNorm2d, Conv2d, ConvBnAct, Linear, Mode, Module, Param};
use crate::simam::EnergyParams;
use crate::tape::{Tape, Var};
use crate::tensor::{conv_output_size, read_tensors, write_tensors, DType, Shape4, Tensor4};

pub const ARCHITECTURE_FILE: &str = "architecture.toml";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum StageOperator {
    Conv { kernel: usize },
    Mbconv { expansion: usize, kernel: usize },
    Head { kernel: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub operator: StageOperator,
    pub resolution: [usize; 2],
    pub channels: usize,
    pub layers: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Insertion {
    pub stage: usize,
    pub block: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureConfig {
    pub name: String,
    pub num_classes: usize,
    pub input_size: usize,
    pub width_mult: f64,
    pub depth_mult: f64,
    pub lambda: f64,
    #[serde(default)]
    pub simam: Vec<Insertion>,
    pub stages: Vec<StageSpec>,
}

const PRESETS: [(&str, &str); 3] = [
    ("table2", include_str!("../configs/table2.toml")),
    ("b4", include_str!("../configs/b4.toml")),
    ("desk", include_str!("../configs/desk.toml")),
];

/// Insertion points used by the stock configs.
pub const DEFAULT_INSERTIONS: [Insertion; 2] = [Insertion { stage: 4, block: 1 }, Insertion { stage: 5, block: 1 }];

/// EfficientNet channel rounding: nearest multiple of 8, at least 8, never
/// more than 10% below the scaled value.
pub fn round_channels(channels: usize, width_mult: f64) -> usize {
    let scaled = channels as f64 * width_mult;
    let mut rounded = (((scaled + 4.0) / 8.0).floor() as usize * 8).max(8);
    if (rounded as f64) < 0.9 * scaled {
        rounded += 8;
    }
    rounded
}

pub fn round_layers(layers: usize, depth_mult: f64) -> usize {
    ((layers as f64 * depth_mult).ceil() as usize).max(1)
}

/// One stage after multipliers, strides and channel flow are worked out.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ResolvedStage {
    /// 1-based row of the stage table.
    pub index: usize,
    pub operator: StageOperator,
    pub in_channels: usize,
    pub out_channels: usize,
    pub layers: usize,
    pub stride: usize,
}

impl ArchitectureConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let (_, text) = PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::Config(format!("unknown preset '{name}' (known: table2, b4, desk)")))?;
        Self::from_toml(text)
    }

    pub fn preset_names() -> impl Iterator<Item = &'static str> {
        PRESETS.iter().map(|(n, _)| *n)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ArchitectureConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn without_simam(&self) -> Self {
        ArchitectureConfig {
            simam: Vec::new(),
            ..self.clone()
        }
    }

    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        let cfg = ArchitectureConfig {
            lambda,
            ..self.clone()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.resolve().map(|_| ())
    }

    /// Applies the multipliers and derives strides and channel flow; checks
    /// every structural rule, including the insertion coordinates.
    pub fn resolve(&self) -> Result<Vec<ResolvedStage>> {
        let cfg_err = |m: String| Err(Error::Config(m));
        if self.num_classes == 0 {
            return cfg_err("num_classes must be ≥ 1".into());
        }
        if !(self.width_mult > 0.0 && self.width_mult.is_finite() && self.depth_mult > 0.0 && self.depth_mult.is_finite())
        {
            return cfg_err(format!(
                "multipliers must be positive, got width {} depth {}",
                self.width_mult, self.depth_mult
            ));
        }
        if EnergyParams::new(self.lambda).is_err() || self.lambda == 0.0 {
            return cfg_err(format!("lambda must be finite and > 0, got {}", self.lambda));
        }
        let n = self.stages.len();
        if n < 3 {
            return cfg_err(format!("need a stem, at least one MBConv stage and a head; got {n} stages"));
        }
        if self.stages[0].resolution != [self.input_size, self.input_size] {
            return cfg_err(format!(
                "stage 1 resolution {:?} must equal the input size {}",
                self.stages[0].resolution, self.input_size
            ));
        }
        let mut out = Vec::with_capacity(n);
        let mut in_channels = 3;
        for (i, st) in self.stages.iter().enumerate() {
            let index = i + 1;
            let position_ok = match st.operator {
                StageOperator::Conv { .. } => i == 0,
                StageOperator::Head { .. } => i == n - 1,
                StageOperator::Mbconv { .. } => i != 0 && i != n - 1,
            };
            if !position_ok {
                return cfg_err(format!("stage {index}: operator {:?} not allowed at this position", st.operator));
            }
            if st.layers == 0 || st.channels == 0 {
                return cfg_err(format!("stage {index}: channels and layers must be ≥ 1"));
            }
            let stride = match self.stages.get(i + 1) {
                None => 1,
                Some(next) => {
                    let [h, w] = st.resolution;
                    let [nh, nw] = next.resolution;
                    if nh == 0 || nw == 0 || h % nh != 0 || w % nw != 0 || h / nh != w / nw || !matches!(h / nh, 1 | 2) {
                        return cfg_err(format!(
                            "stage {index}: resolution {:?} → {:?} is not a stride of 1 or 2",
                            st.resolution, next.resolution
                        ));
                    }
                    h / nh
                }
            };
            let (out_channels, layers) = match st.operator {
                StageOperator::Conv { kernel } | StageOperator::Head { kernel } => {
                    if kernel % 2 == 0 {
                        return cfg_err(format!("stage {index}: kernel {kernel} must be odd"));
                    }
                    if st.layers != 1 {
                        return cfg_err(format!("stage {index}: stem and head stages have exactly one layer"));
                    }
                    (round_channels(st.channels, self.width_mult), 1)
                }
                StageOperator::Mbconv { expansion, kernel } => {
                    let oc = round_channels(st.channels, self.width_mult);
                    let layers = round_layers(st.layers, self.depth_mult);
                    for b in 0..layers {
                        let spec = MBConvSpec::new(
                            if b == 0 { in_channels } else { oc },
                            oc,
                            expansion,
                            kernel,
                            if b == 0 { stride } else { 1 },
                        );
                        spec.validate()
                            .map_err(|e| Error::Config(format!("stage {index} block {}: {e}", b + 1)))?;
                    }
                    (oc, layers)
                }
            };
            out.push(ResolvedStage {
                index,
                operator: st.operator,
                in_channels,
                out_channels,
                layers,
                stride,
            });
            in_channels = out_channels;
        }
        for ins in &self.simam {
            let ok = out.get(ins.stage.wrapping_sub(1)).is_some_and(|s| {
                matches!(s.operator, StageOperator::Mbconv { .. }) && ins.block >= 1 && ins.block <= s.layers
            });
            if !ok {
                return cfg_err(format!(
                    "SimAM insertion (stage {}, block {}) does not name an MBConv block",
                    ins.stage, ins.block
                ));
            }
        }
        Ok(out)
    }

    fn has_simam(&self, stage: usize, block: usize) -> bool {
        self.simam.iter().any(|i| i.stage == stage && i.block == block)
    }

    fn block_specs(&self, st: &ResolvedStage) -> Vec<MBConvSpec> {
        let StageOperator::Mbconv { expansion, kernel } = st.operator else {
            return Vec::new();
        };
        (0..st.layers)
            .map(|b| {
                let first = b == 0;
                let spec = MBConvSpec::new(
                    if first { st.in_channels } else { st.out_channels },
                    st.out_channels,
                    expansion,
                    kernel,
                    if first { st.stride } else { 1 },
                );
                if self.has_simam(st.index, b + 1) {
                    spec.with_simam(self.lambda)
                } else {
                    spec
                }
            })
            .collect()
    }
}

/// Headline and auxiliary cost figures for one input size.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CostReport {
    pub params: usize,
    pub input_hw: (usize, usize),
    pub ops: OpCount,
}

impl CostReport {
    pub fn params_m(&self) -> f64 {
        self.params as f64 / 1e6
    }

    /// Multiply-accumulates in billions; the headline "FLOPs" figure.
    pub fn macs_g(&self) -> f64 {
        self.ops.macs as f64 / 1e9
    }

    /// Two floating point operations per multiply-accumulate.
    pub fn flops_2x_g(&self) -> f64 {
        2.0 * self.macs_g()
    }
}

/// Multiply-accumulates of a dense `k×k` convolution producing `oh×ow`.
pub fn conv_macs(cin: usize, cout: usize, k: usize, oh: usize, ow: usize) -> u64 {
    (oh * ow * cin * k * k * cout) as u64
}

fn conv_bn_params(cin: usize, cout: usize, k: usize) -> usize {
    cin * cout * k * k + 2 * cout
}

/// Trainable parameter count computed from the config alone.
pub fn count_params_config(cfg: &ArchitectureConfig) -> Result<usize> {
    let stages = cfg.resolve()?;
    let mut total = 0;
    for st in &stages {
        total += match st.operator {
            StageOperator::Conv { kernel } => conv_bn_params(st.in_channels, st.out_channels, kernel),
            StageOperator::Head { kernel } => {
                conv_bn_params(st.in_channels, st.out_channels, kernel) + st.out_channels * cfg.num_classes + cfg.num_classes
            }
            StageOperator::Mbconv { .. } => cfg.block_specs(st).iter().map(mbconv_param_count).sum(),
        };
    }
    Ok(total)
}

fn conv_out(h: usize, w: usize, k: usize, s: usize) -> Result<(usize, usize)> {
    match (conv_output_size(h, k, s, k / 2), conv_output_size(w, k, s, k / 2)) {
        (Some(a), Some(b)) => Ok((a, b)),
        _ => Err(Error::invalid(format!("input {h}×{w} too small for a {k}×{k} stride-{s} convolution"))),
    }
}

/// Output shape of every stage for a batch of one `h×w` image.
pub fn shape_trace(cfg: &ArchitectureConfig, h: usize, w: usize) -> Result<Vec<Shape4>> {
    let stages = cfg.resolve()?;
    let (mut h, mut w) = (h, w);
    let mut out = Vec::new();
    for st in &stages {
        match st.operator {
            StageOperator::Conv { kernel } => (h, w) = conv_out(h, w, kernel, st.stride)?,
            StageOperator::Mbconv { kernel, .. } => (h, w) = conv_out(h, w, kernel, st.stride)?,
            StageOperator::Head { kernel } => {
                conv_out(h, w, kernel, st.stride)?;
                out.push(Shape4::new(1, cfg.num_classes, 1, 1));
                continue;
            }
        }
        out.push(Shape4::new(1, st.out_channels, h, w));
    }
    Ok(out)
}

/// Parameters and operation counts for an `h×w` input, from the config.
pub fn count_cost_config(cfg: &ArchitectureConfig, h: usize, w: usize) -> Result<CostReport> {
    let stages = cfg.resolve()?;
    let mut ops = OpCount::default();
    let (mut ch, mut cw) = (h, w);
    for st in &stages {
        match st.operator {
            StageOperator::Conv { kernel } | StageOperator::Head { kernel } => {
                let (oh, ow) = conv_out(ch, cw, kernel, st.stride)?;
                let px = (oh * ow) as u64;
                let cout = st.out_channels as u64;
                ops.macs += conv_macs(st.in_channels, st.out_channels, kernel, oh, ow);
                ops.norm_elems += px * cout;
                ops.pointwise_elems += px * cout;
                (ch, cw) = (oh, ow);
                if let StageOperator::Head { .. } = st.operator {
                    ops.pointwise_elems += px * cout;
                    ops.macs += cout * cfg.num_classes as u64;
                }
            }
            StageOperator::Mbconv { .. } => {
                for spec in cfg.block_specs(st) {
                    ops += mbconv_op_count(&spec, ch, cw)
                        .ok_or_else(|| Error::invalid(format!("input {h}×{w} too small for stage {}", st.index)))?;
                    (ch, cw) = spec.output_hw(ch, cw).expect("checked by mbconv_op_count");
                }
            }
        }
    }
    Ok(CostReport {
        params: count_params_config(cfg)?,
        input_hw: (h, w),
        ops,
    })
}

#[derive(Clone, Debug)]
enum Stage {
    Stem(ConvBnAct),
    Blocks(Vec<MBConv>),
    Head { conv: ConvBnAct, fc: Linear },
}

#[derive(Clone, Debug)]
pub struct Network {
    config: ArchitectureConfig,
    stages: Vec<Stage>,
}

/// Builds the network with weights drawn from a generator seeded by `seed`.
pub fn build(config: &ArchitectureConfig, seed: u64) -> Result<Network> {
    let resolved = config.resolve()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let conv_bn_act = |cin, cout, k, s, rng: &mut ChaCha8Rng| -> Result<ConvBnAct> {
        Ok(ConvBnAct {
            conv: Conv2d::new(cin, cout, k, s, 1, rng)?,
            bn: BatchNorm2d::new(cout),
            act: Some(Activation::Silu),
        })
    };
    let mut stages = Vec::with_capacity(resolved.len());
    for st in &resolved {
        stages.push(match st.operator {
            StageOperator::Conv { kernel } => {
                Stage::Stem(conv_bn_act(st.in_channels, st.out_channels, kernel, st.stride, &mut rng)?)
            }
            StageOperator::Mbconv { .. } => Stage::Blocks(
                config
                    .block_specs(st)
                    .into_iter()
                    .map(|spec| MBConv::new(spec, &mut rng))
                    .collect::<Result<_>>()?,
            ),
            StageOperator::Head { kernel } => Stage::Head {
                conv: conv_bn_act(st.in_channels, st.out_channels, kernel, st.stride, &mut rng)?,
                fc: Linear::new(st.out_channels, config.num_classes, true, &mut rng),
            },
        });
    }
    Ok(Network {
        config: config.clone(),
        stages,
    })
}

impl Network {
    pub fn config(&self) -> &ArchitectureConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// Changes λ at every insertion point.
    pub fn set_lambda(&mut self, lambda: f64) -> Result<()> {
        self.config = self.config.with_lambda(lambda)?;
        for stage in &mut self.stages {
            if let Stage::Blocks(blocks) = stage {
                for b in blocks.iter_mut().filter(|b| b.spec().simam_after_dw) {
                    b.set_simam(Some(lambda))?;
                }
            }
        }
        Ok(())
    }

    /// Number of MBConv blocks carrying SimAM.
    pub fn simam_blocks(&self) -> usize {
        self.stages
            .iter()
            .map(|s| match s {
                Stage::Blocks(b) => b.iter().filter(|b| b.spec().simam_after_dw).count(),
                _ => 0,
            })
            .sum()
    }

    pub fn count_params(&self) -> usize {
        self.num_params()
    }

    pub fn count_cost(&self, h: usize, w: usize) -> Result<CostReport> {
        count_cost_config(&self.config, h, w)
    }

    /// Logits of shape `N×num_classes×1×1`. When `trace` is given, the
    /// output shape of every stage is appended to it.
    pub fn forward_traced(
        &mut self,
        tape: &mut Tape,
        x: Var,
        mode: Mode,
        mut trace: Option<&mut Vec<Shape4>>,
    ) -> Result<Var> {
        let c = tape.shape(x).c;
        if c != 3 {
            return Err(Error::invalid(format!("network expects 3 input channels, got {}", tape.shape(x))));
        }
        let mut h = x;
        for stage in &mut self.stages {
            h = match stage {
                Stage::Stem(layer) => layer.forward(tape, h, mode)?,
                Stage::Blocks(blocks) => {
                    for b in blocks.iter_mut() {
                        h = b.forward(tape, h, mode)?;
                    }
                    h
                }
                Stage::Head { conv, fc } => {
                    let y = conv.forward(tape, h, mode)?;
                    let y = tape.global_avg_pool(y);
                    fc.forward(tape, y)?
                }
            };
            if let Some(t) = trace.as_deref_mut() {
                t.push(tape.shape(h));
            }
        }
        Ok(h)
    }

    pub fn forward(&mut self, tape: &mut Tape, x: Var, mode: Mode) -> Result<Var> {
        self.forward_traced(tape, x, mode, None)
    }

    /// Eval-mode logits for a plain input batch.
    pub fn predict(&mut self, x: &Tensor4) -> Result<Tensor4> {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let y = self.forward(&mut tape, v, Mode::Eval)?;
        Ok(tape.value(y).clone())
    }

    /// Writes `architecture.toml` and `params.bin` into `dir`.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let arch = dir.join(ARCHITECTURE_FILE);
        fs::write(&arch, self.config.to_toml()?).map_err(|e| Error::io(&arch, e))?;
        let path = dir.join(PARAMS_FILE);
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        write_tensors(&mut w, self.state(), DType::F64)?;
        std::io::Write::flush(&mut w).map_err(|e| Error::io(&path, e))?;
        Ok(())
    }

    pub fn load_checkpoint(dir: &Path) -> Result<Self> {
        let config = ArchitectureConfig::load(&dir.join(ARCHITECTURE_FILE))?;
        let mut net = build(&config, 0)?;
        let path = dir.join(PARAMS_FILE);
        let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let tensors = read_tensors(BufReader::new(file))?;
        net.load_state(&tensors)?;
        Ok(net)
    }
}

impl Module for Network {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        for stage in &self.stages {
            match stage {
                Stage::Stem(l) => l.visit_params(f),
                Stage::Blocks(bs) => bs.iter().for_each(|b| b.visit_params(f)),
                Stage::Head { conv, fc } => {
                    conv.visit_params(f);
                    fc.visit_params(f);
                }
            }
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for stage in &mut self.stages {
            match stage {
                Stage::Stem(l) => l.visit_params_mut(f),
                Stage::Blocks(bs) => bs.iter_mut().for_each(|b| b.visit_params_mut(f)),
                Stage::Head { conv, fc } => {
                    conv.visit_params_mut(f);
                    fc.visit_params_mut(f);
                }
            }
        }
    }

    fn visit_buffers<'a>(&'a self, f: &mut dyn FnMut(&'a Tensor4)) {
        for stage in &self.stages {
            match stage {
                Stage::Stem(l) => l.visit_buffers(f),
                Stage::Blocks(bs) => bs.iter().for_each(|b| b.visit_buffers(f)),
                Stage::Head { conv, .. } => conv.visit_buffers(f),
            }
        }
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&mut Tensor4)) {
        for stage in &mut self.stages {
            match stage {
                Stage::Stem(l) => l.visit_buffers_mut(f),
                Stage::Blocks(bs) => bs.iter_mut().for_each(|b| b.visit_buffers_mut(f)),
                Stage::Head { conv, .. } => conv.visit_buffers_mut(f),
            }
        }
    }
}
