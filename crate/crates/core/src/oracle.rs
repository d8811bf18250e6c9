//! Brute-force references for the attention math and the gradient engine.
//!
//! Everything here is written from the per-neuron definitions, with no code
//! shared with [`crate::simam`] or [`crate::tape`], so each can certify the other.
//!
//! The per-neuron energy scored here is
//!
//! ```text
//! E(w, b) = 1/(M−1) Σ_{i≠n} (−1 − (w·q_i + b))² + (1 − (w·n + b))² + λw²
//! ```
//!
//! whose exact minimizer, with `α`, `β²` the mean and variance of the other
//! `M − 1` neurons and `d = n − α`, is
//!
//! ```text
//! w = 2d / (d² + 2β² + 2λ),   b = −(n + α)·w / 2
//! ```
//!
//! with minimum `4(β² + λ) / (d² + 2β² + 2λ)`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::simam::{LABEL_OTHER, LABEL_TARGET};
use crate::tensor::{sigmoid, Tensor4};

/// One neuron scored against the rest of its channel.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuronProblem {
    values: Vec<f64>,
    target: usize,
    lambda: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NeuronTransform {
    pub w: f64,
    pub b: f64,
}

impl NeuronProblem {
    pub fn new(values: Vec<f64>, target: usize, lambda: f64) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::invalid("a neuron problem needs M ≥ 2 values"));
        }
        if target >= values.len() {
            return Err(Error::invalid(format!("target {target} out of range for M={}", values.len())));
        }
        if !lambda.is_finite() || lambda < 0.0 || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("neuron problem needs finite values and lambda ≥ 0"));
        }
        Ok(NeuronProblem { values, target, lambda })
    }

    pub fn m(&self) -> usize {
        self.values.len()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn target_value(&self) -> f64 {
        self.values[self.target]
    }

    pub fn others(&self) -> impl Iterator<Item = f64> + '_ {
        self.values
            .iter()
            .enumerate()
            .filter(move |(i, _)| *i != self.target)
            .map(|(_, &v)| v)
    }

    /// Mean and variance of the other `M − 1` neurons (divisor `M − 1`).
    pub fn excluding_stats(&self) -> (f64, f64) {
        let k = (self.m() - 1) as f64;
        let alpha = self.others().sum::<f64>() / k;
        let beta_sq = self.others().map(|q| (q - alpha) * (q - alpha)).sum::<f64>() / k;
        (alpha, beta_sq)
    }

    /// Mean and variance over all `M` neurons (divisor `M`).
    pub fn all_neuron_stats(&self) -> (f64, f64) {
        let m = self.m() as f64;
        let alpha = self.values.iter().sum::<f64>() / m;
        let beta_sq = self.values.iter().map(|q| (q - alpha) * (q - alpha)).sum::<f64>() / m;
        (alpha, beta_sq)
    }
}

/// The per-neuron energy, evaluated term by term.
pub fn energy(prob: &NeuronProblem, t: NeuronTransform) -> f64 {
    let k = (prob.m() - 1) as f64;
    let others: f64 = prob
        .others()
        .map(|q| {
            let r = LABEL_OTHER - (t.w * q + t.b);
            r * r
        })
        .sum::<f64>()
        / k;
    let r = LABEL_TARGET - (t.w * prob.target_value() + t.b);
    others + r * r + prob.lambda * t.w * t.w
}

/// `(∂E/∂w, ∂E/∂b)`, evaluated term by term.
pub fn energy_gradient(prob: &NeuronProblem, t: NeuronTransform) -> (f64, f64) {
    let k = (prob.m() - 1) as f64;
    let (mut gw, mut gb) = (0.0, 0.0);
    for q in prob.others() {
        let r = LABEL_OTHER - (t.w * q + t.b);
        gw += -2.0 * r * q / k;
        gb += -2.0 * r / k;
    }
    let n = prob.target_value();
    let r = LABEL_TARGET - (t.w * n + t.b);
    gw += -2.0 * r * n + 2.0 * prob.lambda * t.w;
    gb += -2.0 * r;
    (gw, gb)
}

/// Exact minimizer of [`energy`].
pub fn closed_form(prob: &NeuronProblem) -> Result<NeuronTransform> {
    let (alpha, beta_sq) = prob.excluding_stats();
    let n = prob.target_value();
    let d = n - alpha;
    let denom = d * d + 2.0 * beta_sq + 2.0 * prob.lambda;
    if denom == 0.0 {
        return Err(Error::invalid(
            "degenerate neuron problem: lambda = 0 with a constant channel has no unique minimizer",
        ));
    }
    let w = 2.0 * d / denom;
    Ok(NeuronTransform {
        w,
        b: -0.5 * (n + alpha) * w,
    })
}

/// Minimizes [`energy`] by plain gradient descent from the origin.
///
/// The step is `1 / tr(H)` for the (constant) Hessian `H`, which is below
/// `2 / L` so every step contracts.
pub fn minimize_by_descent(prob: &NeuronProblem, tol: f64, max_iter: usize) -> NeuronTransform {
    let k = (prob.m() - 1) as f64;
    let n = prob.target_value();
    let mean_sq = prob.others().map(|q| q * q).sum::<f64>() / k;
    let trace = 2.0 * (mean_sq + n * n + prob.lambda) + 4.0;
    let step = 1.0 / trace;
    let mut t = NeuronTransform { w: 0.0, b: 0.0 };
    for _ in 0..max_iter {
        let (gw, gb) = energy_gradient(prob, t);
        if gw.hypot(gb) < tol {
            break;
        }
        t.w -= step * gw;
        t.b -= step * gb;
    }
    t
}

/// Lowest energy among `draws` random transforms: half spread over a box,
/// half jittered around `center`.
pub fn random_search(prob: &NeuronProblem, center: NeuronTransform, draws: usize, rng: &mut impl Rng) -> f64 {
    (0..draws)
        .map(|i| {
            let t = if i % 2 == 0 {
                NeuronTransform {
                    w: rng.gen_range(-5.0..5.0),
                    b: rng.gen_range(-5.0..5.0),
                }
            } else {
                NeuronTransform {
                    w: center.w + rng.gen_range(-1e-2..1e-2),
                    b: center.b + rng.gen_range(-1e-2..1e-2),
                }
            };
            energy(prob, t)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Minimal energy using statistics over all `M` neurons, as the attention
/// operator computes it.
pub fn all_neuron_min_energy(prob: &NeuronProblem) -> f64 {
    let (alpha, beta_sq) = prob.all_neuron_stats();
    let d = prob.target_value() - alpha;
    4.0 * (beta_sq + prob.lambda) / (d * d + 2.0 * beta_sq + 2.0 * prob.lambda)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConsistencyReport {
    /// `energy(closed_form)` with excluding-n statistics.
    pub exact: f64,
    /// The all-neuron shortcut.
    pub shortcut: f64,
    /// `|exact − shortcut| / exact`.
    pub relative_gap: f64,
}

pub fn min_energy_consistency(prob: &NeuronProblem) -> Result<ConsistencyReport> {
    let exact = energy(prob, closed_form(prob)?);
    let shortcut = all_neuron_min_energy(prob);
    Ok(ConsistencyReport {
        exact,
        shortcut,
        relative_gap: (exact - shortcut).abs() / exact,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelConsistency {
    /// Neuron order by descending importance (`1 / e`) agrees between the
    /// exact and shortcut energies.
    pub ranking_matches: bool,
    pub max_relative_gap: f64,
    pub mean_relative_gap: f64,
}

/// Scores every neuron of one channel both ways and compares them.
pub fn channel_consistency(values: &[f64], lambda: f64) -> Result<ChannelConsistency> {
    let mut exact = Vec::with_capacity(values.len());
    let mut shortcut = Vec::with_capacity(values.len());
    for target in 0..values.len() {
        let r = min_energy_consistency(&NeuronProblem::new(values.to_vec(), target, lambda)?)?;
        exact.push(r.exact);
        shortcut.push(r.shortcut);
    }
    let order = |e: &[f64]| {
        let mut idx: Vec<usize> = (0..e.len()).collect();
        idx.sort_by(|&a, &b| e[a].total_cmp(&e[b]));
        idx
    };
    let gaps: Vec<f64> = exact.iter().zip(&shortcut).map(|(x, s)| (x - s).abs() / x).collect();
    Ok(ChannelConsistency {
        ranking_matches: order(&exact) == order(&shortcut),
        max_relative_gap: gaps.iter().copied().fold(0.0, f64::max),
        mean_relative_gap: gaps.iter().sum::<f64>() / gaps.len() as f64,
    })
}

/// Attention weights computed neuron by neuron from the all-neuron energy.
///
/// Unlike the production operator this accepts `lambda = 0`, provided no
/// channel is constant (the energy is 0/0 there).
pub fn reference_attention_weights(x: &Tensor4, lambda: f64) -> Result<Tensor4> {
    let s = x.shape();
    let mut out = Tensor4::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let plane = x.plane(n, c);
            let m = plane.len() as f64;
            let alpha = plane.iter().sum::<f64>() / m;
            let beta_sq = plane.iter().map(|q| (q - alpha) * (q - alpha)).sum::<f64>() / m;
            if beta_sq + lambda == 0.0 {
                return Err(Error::invalid(format!(
                    "channel ({n}, {c}) is constant; its energy is undefined at lambda = 0"
                )));
            }
            for (j, &q) in plane.iter().enumerate() {
                let d = q - alpha;
                let e = 4.0 * (beta_sq + lambda) / (d * d + 2.0 * beta_sq + 2.0 * lambda);
                out.plane_mut(n, c)[j] = sigmoid(1.0 / e);
            }
        }
    }
    Ok(out)
}

/// `(g(h) − g(−h)) / 2h`.
pub fn central_difference(mut g: impl FnMut(f64) -> f64, h: f64) -> f64 {
    let up = g(h);
    let down = g(-h);
    (up - down) / (2.0 * h)
}

/// Central-difference estimate of `∂f/∂xᵢ` for each listed flat index `i`.
pub fn finite_diff_at(mut f: impl FnMut(&Tensor4) -> f64, x: &Tensor4, indices: &[usize], h: f64) -> Vec<f64> {
    let mut probe = x.clone();
    indices
        .iter()
        .map(|&i| {
            let orig = x.data()[i];
            let d = central_difference(
                |delta| {
                    probe.data_mut()[i] = orig + delta;
                    f(&probe)
                },
                h,
            );
            probe.data_mut()[i] = orig;
            d
        })
        .collect()
}

/// Central-difference estimate of the whole of `∇f(x)`.
pub fn finite_diff_grad(f: impl FnMut(&Tensor4) -> f64, x: &Tensor4, h: f64) -> Tensor4 {
    let all: Vec<usize> = (0..x.numel()).collect();
    Tensor4::from_vec(x.shape(), finite_diff_at(f, x, &all, h)).expect("one entry per coordinate")
}

/// `|analytic − numeric| / max(1, |analytic|)`.
pub fn gradient_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}
