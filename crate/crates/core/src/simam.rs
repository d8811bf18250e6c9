//! Parameter-free 3-D attention from a closed-form neuron energy.
//!
//! For every neuron `x` of a channel with mean `μ` and biased variance `σ²`
//! (both over the channel's `H·W` positions of one batch item) the minimal
//! energy is
//!
//! ```text
//! e* = 4(σ² + λ) / ((x − μ)² + 2σ² + 2λ)
//! ```
//!
//! and the refined feature is `sigmoid(1 / e*) · x`. A low energy marks a
//! neuron that stands out from its channel, so it receives a larger gate.

use crate::error::{Error, Result};
use crate::tensor::{channel_moments, sigmoid, ChannelMoments, Tensor4};

pub const DEFAULT_LAMBDA: f64 = 7e-4;
/// Target label of the neuron being scored.
pub const LABEL_TARGET: f64 = 1.0;
/// Label of every other neuron in the channel.
pub const LABEL_OTHER: f64 = -1.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyParams {
    lambda: f64,
}

impl EnergyParams {
    pub fn new(lambda: f64) -> Result<Self> {
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(Error::invalid(format!("lambda must be finite and ≥ 0, got {lambda}")));
        }
        Ok(EnergyParams { lambda })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }
}

impl Default for EnergyParams {
    fn default() -> Self {
        EnergyParams { lambda: DEFAULT_LAMBDA }
    }
}

/// Per-(batch, channel) mean `α̂` and biased variance `β̂²`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    moments: ChannelMoments,
}

impl ChannelStats {
    pub fn of(x: &Tensor4) -> Result<Self> {
        Ok(ChannelStats {
            moments: channel_moments(x)?,
        })
    }

    pub fn alpha_hat(&self, n: usize, c: usize) -> f64 {
        self.moments.mean_at(n, c)
    }

    pub fn beta_hat_sq(&self, n: usize, c: usize) -> f64 {
        self.moments.var_at(n, c)
    }
}

/// Minimal energies and the attention weights derived from them, both with
/// the input's shape.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyMap {
    pub e_star: Tensor4,
    pub weights: Tensor4,
}

fn check_input(x: &Tensor4, params: &EnergyParams) -> Result<()> {
    if params.lambda <= 0.0 {
        return Err(Error::invalid(
            "simam needs lambda > 0; lambda = 0 is only meaningful for non-constant channels",
        ));
    }
    if !x.all_finite() {
        return Err(Error::NonFinite("simam input"));
    }
    Ok(())
}

/// Visits every neuron with `(index, x − α̂, β̂²)`.
fn for_each_centered(x: &Tensor4, stats: &ChannelStats, mut f: impl FnMut(usize, f64, f64)) {
    let s = x.shape();
    let p = s.plane();
    for n in 0..s.n {
        for c in 0..s.c {
            let (mu, var) = (stats.alpha_hat(n, c), stats.beta_hat_sq(n, c));
            let base = (n * s.c + c) * p;
            for (j, &q) in x.plane(n, c).iter().enumerate() {
                f(base + j, q - mu, var);
            }
        }
    }
}

pub fn simam_energy(x: &Tensor4, params: &EnergyParams) -> Result<EnergyMap> {
    check_input(x, params)?;
    let stats = ChannelStats::of(x)?;
    let lambda = params.lambda;
    let mut e_star = Tensor4::zeros(x.shape());
    let mut weights = Tensor4::zeros(x.shape());
    {
        let (e, w) = (e_star.data_mut(), weights.data_mut());
        for_each_centered(x, &stats, |i, d, var| {
            let energy = 4.0 * (var + lambda) / (d * d + 2.0 * var + 2.0 * lambda);
            e[i] = energy;
            w[i] = sigmoid(1.0 / energy);
        });
    }
    Ok(EnergyMap { e_star, weights })
}

/// `sigmoid(1 / e*) ⊙ x`. Adds no trainable parameters.
pub fn simam_refine(x: &Tensor4, params: &EnergyParams) -> Result<Tensor4> {
    check_input(x, params)?;
    let stats = ChannelStats::of(x)?;
    let lambda = params.lambda;
    let mut out = Tensor4::zeros(x.shape());
    let xs = x.data();
    let o = out.data_mut();
    for_each_centered(x, &stats, |i, d, var| {
        // 1 / e* = (x − μ)² / (4(σ² + λ)) + 1/2
        let inv_e = d * d / (4.0 * (var + lambda)) + 0.5;
        o[i] = sigmoid(inv_e) * xs[i];
    });
    Ok(out)
}

/// Gradient of `simam_refine` with respect to its input, including the
/// dependence of each channel's mean and variance on every neuron.
pub(crate) fn simam_backward(x: &Tensor4, gy: &Tensor4, lambda: f64) -> Result<Tensor4> {
    let stats = ChannelStats::of(x)?;
    let s = x.shape();
    let m = s.plane() as f64;
    let mut gx = Tensor4::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let (mu, var) = (stats.alpha_hat(n, c), stats.beta_hat_sq(n, c));
            let denom = 4.0 * (var + lambda);
            let xp = x.plane(n, c);
            let gp = gy.plane(n, c);
            // a_j = dL/dz_j where z_j = (x_j − μ)² / D + 1/2 and y_j = x_j · sigmoid(z_j)
            let mut sum_ad = 0.0;
            let mut sum_as = 0.0;
            let mut direct = vec![0.0; xp.len()];
            let mut a = vec![0.0; xp.len()];
            for j in 0..xp.len() {
                let d = xp[j] - mu;
                let g = sigmoid(d * d / denom + 0.5);
                direct[j] = gp[j] * g;
                a[j] = gp[j] * xp[j] * g * (1.0 - g);
                sum_ad += a[j] * d;
                sum_as += a[j] * d * d;
            }
            let out = gx.plane_mut(n, c);
            for j in 0..xp.len() {
                let d = xp[j] - mu;
                out[j] = direct[j] + 2.0 * a[j] * d / denom
                    - 2.0 * sum_ad / (m * denom)
                    - 8.0 * d * sum_as / (m * denom * denom);
            }
        }
    }
    Ok(gx)
}
