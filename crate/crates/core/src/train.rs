//! Optimizers, learning-rate schedules and the epoch loop.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{derive_seed, make_batch, AugmentationConfig, Dataset, LoadedData};
use crate::error::{Error, Result};
use crate::network::Network;
use crate::nn::{Mode, Module, ParamKind};
use crate::tape::{Gradients, Tape};
use crate::tensor::{argmax_rows, Tensor4};

pub const METRICS_FILE: &str = "metrics.csv";
pub const BEST_DIR: &str = "best";
pub const FINAL_DIR: &str = "final";
pub const LAST_FINITE_DIR: &str = "last_finite";
pub const METRICS_HEADER: &str = "epoch,step,lr,train_loss,train_acc,test_acc";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerConfig {
    pub fn adam() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr0: 1e-3,
            momentum: 0.0,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn sgd() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            momentum: 0.9,
            weight_decay: 1e-4,
            ..Self::adam()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum)
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
        {
            return Err(Error::Config("momentum and Adam betas must lie in [0, 1)".into()));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 || self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::Config("weight_decay must be ≥ 0 and eps > 0".into()));
        }
        Ok(())
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::adam()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchedulerKind {
    /// Stepped once per optimizer step.
    Cosine,
    /// Stepped once per epoch.
    Step,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub kind: SchedulerKind,
    pub t_max: i64,
    pub eta_min: f64,
    pub step_size_epochs: usize,
    pub gamma: f64,
}

impl SchedulerConfig {
    pub fn cosine() -> Self {
        SchedulerConfig {
            kind: SchedulerKind::Cosine,
            t_max: 21_000,
            eta_min: 1e-7,
            step_size_epochs: 20,
            gamma: 0.1,
        }
    }

    pub fn step() -> Self {
        SchedulerConfig {
            kind: SchedulerKind::Step,
            ..Self::cosine()
        }
    }
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self::cosine()
    }
}

/// Learning rate at optimizer step `t` (cosine) or epoch `t` (step).
pub fn lr_at(sched: &SchedulerConfig, t: usize, lr0: f64) -> Result<f64> {
    match sched.kind {
        SchedulerKind::Cosine => {
            if sched.t_max <= 0 {
                return Err(Error::Config(format!("t_max must be positive, got {}", sched.t_max)));
            }
            let t_max = sched.t_max as usize;
            if t >= t_max {
                return Ok(sched.eta_min);
            }
            let phase = (1.0 + (PI * t as f64 / t_max as f64).cos()) / 2.0;
            Ok(sched.eta_min + (lr0 - sched.eta_min) * phase)
        }
        SchedulerKind::Step => {
            if sched.step_size_epochs == 0 {
                return Err(Error::Config("step_size_epochs must be ≥ 1".into()));
            }
            // repeated multiplication: 1e-3 · 0.1 · 0.1 lands exactly on 1e-5
            let mut lr = lr0;
            for _ in 0..t / sched.step_size_epochs {
                lr *= sched.gamma;
            }
            Ok(lr)
        }
    }
}

/// Per-parameter optimizer state, kept in module visiting order.
#[derive(Clone, Debug)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Optimizer {
            cfg,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    /// Applies one update with learning rate `lr` using `grads[i]` for the
    /// `i`-th parameter of `module`. `None` entries are treated as zero.
    pub fn step_with(&mut self, module: &mut dyn Module, grads: &[Option<Tensor4>], lr: f64) -> Result<()> {
        self.steps += 1;
        let cfg = self.cfg;
        let t = self.steps as i32;
        let (first, second) = (&mut self.first, &mut self.second);
        let mut index = 0;
        let mut err = None;
        module.visit_params_mut(&mut |p| {
            let i = index;
            index += 1;
            if err.is_some() {
                return;
            }
            let n = p.numel();
            if first.len() <= i {
                first.push(vec![0.0; n]);
                second.push(vec![0.0; n]);
            }
            let g = match grads.get(i) {
                Some(Some(g)) if g.numel() == n => Some(g.data()),
                Some(Some(g)) => {
                    err = Some(Error::invalid(format!("gradient {} for parameter of {} values", g.shape(), n)));
                    return;
                }
                _ => None,
            };
            let decay = if p.kind == ParamKind::Weight { cfg.weight_decay } else { 0.0 };
            let m = &mut first[i];
            let v = &mut second[i];
            let theta = p.value.data_mut();
            match cfg.kind {
                OptimizerKind::Sgd => {
                    for j in 0..n {
                        let gj = g.map_or(0.0, |g| g[j]) + decay * theta[j];
                        m[j] = cfg.momentum * m[j] + gj;
                        theta[j] -= lr * m[j];
                    }
                }
                OptimizerKind::Adam => {
                    let c1 = 1.0 - cfg.beta1.powi(t);
                    let c2 = 1.0 - cfg.beta2.powi(t);
                    for j in 0..n {
                        let gj = g.map_or(0.0, |g| g[j]) + decay * theta[j];
                        m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
                        v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
                        theta[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.eps);
                    }
                }
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    pub fn step(&mut self, module: &mut dyn Module, grads: &Gradients, lr: f64) -> Result<()> {
        let per_param: Vec<Option<Tensor4>> = module.params().iter().map(|p| grads.param(p.id())).collect();
        self.step_with(module, &per_param, lr)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainRunConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub image_size: usize,
    pub optimizer: OptimizerConfig,
    pub scheduler: SchedulerConfig,
    pub augmentation: AugmentationConfig,
    /// Overrides the architecture's λ when set.
    pub lambda: Option<f64>,
    /// Stop once an epoch's training accuracy reaches this value.
    pub target_train_acc: Option<f64>,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        TrainRunConfig {
            epochs: 80,
            batch_size: 32,
            seed: 0,
            image_size: 224,
            optimizer: OptimizerConfig::adam(),
            scheduler: SchedulerConfig::cosine(),
            augmentation: AugmentationConfig::default(),
            lambda: None,
            target_train_acc: None,
        }
    }
}

impl TrainRunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.image_size == 0 {
            return Err(Error::Config("epochs, batch_size and image_size must be ≥ 1".into()));
        }
        self.optimizer.validate()?;
        self.augmentation.validate()?;
        lr_at(&self.scheduler, 0, self.optimizer.lr0)?;
        if let Some(l) = self.lambda {
            if !(l > 0.0 && l.is_finite()) {
                return Err(Error::Config(format!("lambda must be finite and > 0, got {l}")));
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainRunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Learning rate of the optimizer step with 0-based global index `step`
    /// taken during 0-based `epoch`.
    pub fn lr_for(&self, epoch: usize, step: usize) -> Result<f64> {
        let t = match self.scheduler.kind {
            SchedulerKind::Cosine => step,
            SchedulerKind::Step => epoch,
        };
        lr_at(&self.scheduler, t, self.optimizer.lr0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Optimizer steps completed so far.
    pub step: usize,
    /// Rate used by the epoch's last step.
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

impl EpochRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.step, self.lr, self.train_loss, self.train_acc, self.test_acc
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_test_acc: f64,
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from(METRICS_HEADER);
        s.push('\n');
        for r in &self.log {
            let _ = writeln!(s, "{}", r.csv_line());
        }
        s
    }

    pub fn final_record(&self) -> &EpochRecord {
        self.log.last().expect("a report has at least one epoch")
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    pub mean_loss: f64,
}

/// Fraction of rows whose argmax (ties to the lowest class index) equals
/// the label.
pub fn accuracy_from_logits(logits: &Tensor4, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Data("accuracy of an empty set is undefined".into()));
    }
    if logits.shape().n != labels.len() {
        return Err(Error::invalid(format!("{} logit rows for {} labels", logits.shape().n, labels.len())));
    }
    let correct = argmax_rows(logits).iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / labels.len() as f64)
}

pub fn evaluate(net: &mut Network, data: &Dataset, norm: &crate::data::NormStats, image_size: usize, batch_size: usize) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let order: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0usize;
    let mut loss_sum = 0.0;
    for chunk in order.chunks(batch_size.max(1)) {
        let (x, labels) = make_batch(data, chunk, image_size, None, norm)?;
        let logits = net.predict(&x)?;
        loss_sum += crate::tensor::cross_entropy(&logits, &labels)? * chunk.len() as f64;
        correct += argmax_rows(&logits).iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(EvalResult {
        accuracy: correct as f64 / data.len() as f64,
        mean_loss: loss_sum / data.len() as f64,
    })
}

/// Deterministic sample order of one epoch.
pub fn epoch_order(seed: u64, epoch: usize, len: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0x5348_5546, epoch as u64]));
    order.shuffle(&mut rng);
    order
}

/// One optimizer step on a prepared batch; returns (mean loss, correct).
pub fn train_step(net: &mut Network, opt: &mut Optimizer, x: &Tensor4, labels: &[usize], lr: f64) -> Result<(f64, usize)> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let logits = net.forward(&mut tape, xv, Mode::Train)?;
    let loss = tape.cross_entropy(logits, labels)?;
    let loss_value = tape.value(loss).data()[0];
    let correct = argmax_rows(tape.value(logits)).iter().zip(labels).filter(|(p, l)| p == l).count();
    if !loss_value.is_finite() {
        return Ok((loss_value, correct));
    }
    let grads = tape.backward(loss)?;
    opt.step(net, &grads, lr)?;
    Ok((loss_value, correct))
}

fn state_is_finite(net: &Network) -> bool {
    net.state().iter().all(|t| t.all_finite())
}

/// Saves the (finite) current state into `last_finite` and builds the error.
fn diverged(net: &Network, out: Option<&OutputDir>, epoch: usize, step: usize) -> Result<Error> {
    if let Some(o) = out {
        net.save_checkpoint(&o.0.join(LAST_FINITE_DIR))?;
    }
    Ok(Error::Divergence { epoch: epoch + 1, step })
}

/// Where training writes its artifacts.
#[derive(Clone, Debug)]
pub struct OutputDir(pub PathBuf);

impl OutputDir {
    fn metrics(&self) -> PathBuf {
        self.0.join(METRICS_FILE)
    }
}

/// Trains `net` on `data.train`, evaluating on `data.test` after each epoch.
///
/// With an output directory, `metrics.csv` is appended after every epoch and
/// the `best` (highest test accuracy, earliest on ties) and `final`
/// checkpoints are written. A step that yields a non-finite loss, non-finite
/// activations or non-finite parameters aborts with [`Error::Divergence`];
/// the network is rolled back to its state before that step, which is also
/// saved into `last_finite`.
pub fn train(net: &mut Network, data: &LoadedData, cfg: &TrainRunConfig, out: Option<&Path>) -> Result<TrainReport> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    if let Some(l) = cfg.lambda {
        net.set_lambda(l)?;
    }
    let k = net.num_classes();
    if let Some(s) = data.train.samples.iter().chain(&data.test.samples).find(|s| s.label >= k) {
        return Err(Error::Data(format!(
            "label {} of {} exceeds the network's {k} classes",
            s.label,
            s.path.display()
        )));
    }
    let out = out.map(|p| OutputDir(p.to_path_buf()));
    if let Some(o) = &out {
        fs::create_dir_all(&o.0).map_err(|e| Error::io(&o.0, e))?;
        fs::write(o.metrics(), format!("{METRICS_HEADER}\n")).map_err(|e| Error::io(o.metrics(), e))?;
    }
    let mut opt = Optimizer::new(cfg.optimizer)?;
    let mut log = Vec::new();
    let mut best = (0usize, f64::NEG_INFINITY);
    let mut step = 0usize;
    let mut stopped_early = false;
    for epoch in 0..cfg.epochs {
        let order = epoch_order(cfg.seed, epoch, data.train.len());
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut lr = cfg.lr_for(epoch, step)?;
        for chunk in order.chunks(cfg.batch_size) {
            lr = cfg.lr_for(epoch, step)?;
            let (x, labels) = make_batch(
                &data.train,
                chunk,
                cfg.image_size,
                Some((&cfg.augmentation, cfg.seed, epoch)),
                &data.norm,
            )?;
            let before: Vec<Tensor4> = net.state().into_iter().cloned().collect();
            let outcome = match train_step(net, &mut opt, &x, &labels, lr) {
                Err(Error::NonFinite(_)) => None,
                Err(e) => return Err(e),
                Ok((loss, c)) if loss.is_finite() && state_is_finite(net) => Some((loss, c)),
                Ok(_) => None,
            };
            let Some((loss, c)) = outcome else {
                net.load_state(&before)?;
                return Err(diverged(net, out.as_ref(), epoch, step)?);
            };
            loss_sum += loss * chunk.len() as f64;
            correct += c;
            step += 1;
        }
        let test_acc = if data.test.is_empty() {
            0.0
        } else {
            match evaluate(net, &data.test, &data.norm, cfg.image_size, cfg.batch_size) {
                Ok(r) if r.mean_loss.is_finite() => r.accuracy,
                Ok(_) | Err(Error::NonFinite(_)) => return Err(diverged(net, out.as_ref(), epoch, step)?),
                Err(e) => return Err(e),
            }
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            step,
            lr,
            train_loss: loss_sum / data.train.len() as f64,
            train_acc: correct as f64 / data.train.len() as f64,
            test_acc,
        };
        if let Some(o) = &out {
            use std::io::Write;
            let mut f = fs::OpenOptions::new()
                .append(true)
                .open(o.metrics())
                .map_err(|e| Error::io(o.metrics(), e))?;
            writeln!(f, "{}", record.csv_line()).map_err(|e| Error::io(o.metrics(), e))?;
            if test_acc > best.1 {
                net.save_checkpoint(&o.0.join(BEST_DIR))?;
            }
        }
        if test_acc > best.1 {
            best = (epoch + 1, test_acc);
        }
        let reached = cfg.target_train_acc.is_some_and(|t| record.train_acc >= t);
        log.push(record);
        if reached {
            stopped_early = epoch + 1 < cfg.epochs;
            break;
        }
    }
    if let Some(o) = &out {
        net.save_checkpoint(&o.0.join(FINAL_DIR))?;
    }
    Ok(TrainReport {
        log,
        best_epoch: best.0,
        best_test_acc: best.1,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Param;
    use crate::tensor::Shape4;
    use rand::Rng;

    /// θ as a single module, for optimizer tests on f(θ) = |θ − θ*|².
    struct Quadratic {
        theta: Param,
        scale: Param,
    }

    impl Module for Quadratic {
        fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
            f(&self.theta);
            f(&self.scale);
        }
        fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
            f(&mut self.theta);
            f(&mut self.scale);
        }
    }

    fn converge(cfg: OptimizerConfig) -> (f64, usize) {
        let target = [1.5, -2.0, 0.25, 3.0];
        let mut q = Quadratic {
            theta: Param::new(Tensor4::zeros(Shape4::new(1, 4, 1, 1)), ParamKind::Weight),
            scale: Param::new(Tensor4::ones(Shape4::new(1, 1, 1, 1)), ParamKind::NormScale),
        };
        let mut opt = Optimizer::new(cfg).unwrap();
        for step in 1..=5000 {
            let g: Vec<f64> = q.theta.value.data().iter().zip(&target).map(|(t, s)| 2.0 * (t - s)).collect();
            let g = Tensor4::from_vec(Shape4::new(1, 4, 1, 1), g).unwrap();
            opt.step_with(&mut q, &[Some(g), None], 1e-2).unwrap();
            let err = q.theta.value.data().iter().zip(&target).map(|(t, s)| (t - s).abs()).fold(0.0, f64::max);
            if err < 1e-6 {
                return (err, step);
            }
        }
        (f64::INFINITY, 5000)
    }

    #[test]
    fn sgd_and_adam_solve_a_quadratic() {
        let sgd = OptimizerConfig {
            weight_decay: 0.0,
            ..OptimizerConfig::sgd()
        };
        let (err, steps) = converge(sgd);
        assert!(err < 1e-6 && steps <= 5000, "sgd {err} after {steps}");
        let (err, steps) = converge(OptimizerConfig::adam());
        assert!(err < 1e-6 && steps <= 5000, "adam {err} after {steps}");
    }

    #[test]
    fn weight_decay_only_touches_weights() {
        let mut q = Quadratic {
            theta: Param::new(Tensor4::full(Shape4::new(1, 4, 1, 1), 2.0), ParamKind::Weight),
            scale: Param::new(Tensor4::full(Shape4::new(1, 1, 1, 1), 2.0), ParamKind::NormScale),
        };
        let mut opt = Optimizer::new(OptimizerConfig::sgd()).unwrap();
        let zero = Some(Tensor4::zeros(Shape4::new(1, 4, 1, 1)));
        let zero_scale = Some(Tensor4::zeros(Shape4::new(1, 1, 1, 1)));
        opt.step_with(&mut q, &[zero, zero_scale], 0.1).unwrap();
        // zero gradient: weights shrink by lr · wd · θ, the norm scale stays
        assert!(q.theta.value.data().iter().all(|&v| (v - (2.0 - 0.1 * 1e-4 * 2.0)).abs() < 1e-15));
        assert_eq!(q.scale.value.data()[0], 2.0);
    }

    #[test]
    fn scheduler_values() {
        let cos = SchedulerConfig::cosine();
        assert_eq!(lr_at(&cos, 0, 1e-3).unwrap(), 1e-3);
        assert_eq!(lr_at(&cos, 21_000, 1e-3).unwrap(), 1e-7);
        assert_eq!(lr_at(&cos, 50_000, 1e-3).unwrap(), 1e-7);
        let mid = lr_at(&cos, 10_500, 1e-3).unwrap();
        assert!((mid - (1e-7 + (1e-3 - 1e-7) / 2.0)).abs() < 1e-15);
        let step = SchedulerConfig::step();
        assert_eq!(lr_at(&step, 0, 1e-3).unwrap(), 1e-3);
        assert_eq!(lr_at(&step, 19, 1e-3).unwrap(), 1e-3);
        assert_eq!(lr_at(&step, 20, 1e-3).unwrap(), 1e-4);
        assert_eq!(lr_at(&step, 40, 1e-3).unwrap(), 1e-5);
        let bad = SchedulerConfig { t_max: 0, ..cos };
        assert!(lr_at(&bad, 0, 1e-3).is_err());
    }

    #[test]
    fn accuracy_rules() {
        let labels = [0, 1, 2, 3, 0, 1, 2, 3];
        let perfect = Tensor4::from_fn(Shape4::new(8, 4, 1, 1), |n, c, _, _| if labels[n] == c { 10.0 } else { 0.0 });
        assert_eq!(accuracy_from_logits(&perfect, &labels).unwrap(), 1.0);
        let uniform = Tensor4::zeros(Shape4::new(8, 4, 1, 1));
        assert_eq!(accuracy_from_logits(&uniform, &labels).unwrap(), 0.25);
        assert!(accuracy_from_logits(&uniform, &[]).is_err());
    }

    #[test]
    fn accuracy_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = Tensor4::from_fn(Shape4::new(50, 5, 1, 1), |_, _, _, _| rng.gen_range(0..4) as f64);
        let labels: Vec<usize> = (0..50).map(|_| rng.gen_range(0..5)).collect();
        let mut correct = 0;
        for (n, &label) in labels.iter().enumerate() {
            let mut best = 0;
            for c in 1..5 {
                if logits.at(n, c, 0, 0) > logits.at(n, best, 0, 0) {
                    best = c;
                }
            }
            correct += (best == label) as usize;
        }
        assert_eq!(accuracy_from_logits(&logits, &labels).unwrap(), correct as f64 / 50.0);
    }

    #[test]
    fn run_config_toml_roundtrip() {
        let cfg = TrainRunConfig {
            lambda: Some(7e-3),
            target_train_acc: Some(0.9),
            ..Default::default()
        };
        assert_eq!(TrainRunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
        let partial = TrainRunConfig::from_toml("epochs = 3\n").unwrap();
        assert_eq!(partial.epochs, 3);
        assert_eq!(partial.batch_size, 32);
        assert!(TrainRunConfig::from_toml("epochs = 0\n").is_err());
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let a = epoch_order(1, 0, 100);
        assert_eq!(a, epoch_order(1, 0, 100));
        assert_ne!(a, epoch_order(1, 1, 100));
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
    }
}
