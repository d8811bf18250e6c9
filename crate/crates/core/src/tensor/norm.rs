use super::{Shape4, Tensor4};
use crate::error::{Error, Result};

/// Values saved by a training-mode batch norm for its backward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache {
    pub x_hat: Tensor4,
    pub inv_std: Vec<f64>,
    /// Per-channel batch mean and biased variance.
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

fn check_affine(x: Shape4, gamma: &Tensor4, beta: &Tensor4) -> Result<()> {
    let want = Shape4::new(1, x.c, 1, 1);
    if gamma.shape() != want || beta.shape() != want {
        return Err(Error::invalid(format!(
            "batch_norm: affine parameters must be {want}, got {} and {}",
            gamma.shape(),
            beta.shape()
        )));
    }
    Ok(())
}

/// Normalizes each channel with statistics over `(N, H, W)`.
pub fn batch_norm_train(x: &Tensor4, gamma: &Tensor4, beta: &Tensor4, eps: f64) -> Result<(Tensor4, BatchNormCache)> {
    let s = x.shape();
    check_affine(s, gamma, beta)?;
    let m = (s.n * s.plane()) as f64;
    let mut mean = vec![0.0; s.c];
    let mut var = vec![0.0; s.c];
    for c in 0..s.c {
        let mu = (0..s.n).map(|n| x.plane(n, c).iter().sum::<f64>()).sum::<f64>() / m;
        let v = (0..s.n)
            .map(|n| x.plane(n, c).iter().map(|q| (q - mu) * (q - mu)).sum::<f64>())
            .sum::<f64>()
            / m;
        mean[c] = mu;
        var[c] = v;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut x_hat = Tensor4::zeros(s);
    let mut y = Tensor4::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let (g, b) = (gamma.data()[c], beta.data()[c]);
            let src = x.plane(n, c);
            let xh = x_hat.plane_mut(n, c);
            for (d, &q) in xh.iter_mut().zip(src) {
                *d = (q - mean[c]) * inv_std[c];
            }
            let xh = x_hat.plane(n, c);
            for (d, &h) in y.plane_mut(n, c).iter_mut().zip(xh) {
                *d = g * h + b;
            }
        }
    }
    Ok((
        y,
        BatchNormCache {
            x_hat,
            inv_std,
            mean,
            var,
        },
    ))
}

/// Affine normalization with fixed running statistics.
pub fn batch_norm_eval(
    x: &Tensor4,
    gamma: &Tensor4,
    beta: &Tensor4,
    running_mean: &[f64],
    running_var: &[f64],
    eps: f64,
) -> Result<Tensor4> {
    let s = x.shape();
    check_affine(s, gamma, beta)?;
    if running_mean.len() != s.c || running_var.len() != s.c {
        return Err(Error::invalid("batch_norm: running statistics length mismatch"));
    }
    let mut y = Tensor4::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let scale = gamma.data()[c] / (running_var[c] + eps).sqrt();
            let shift = beta.data()[c] - running_mean[c] * scale;
            for (d, &q) in y.plane_mut(n, c).iter_mut().zip(x.plane(n, c)) {
                *d = q * scale + shift;
            }
        }
    }
    Ok(y)
}

/// Backward of [`batch_norm_train`]: `(d x, d gamma, d beta)`.
pub fn batch_norm_backward(gy: &Tensor4, gamma: &Tensor4, cache: &BatchNormCache) -> (Tensor4, Tensor4, Tensor4) {
    let s = gy.shape();
    let m = (s.n * s.plane()) as f64;
    let mut ggamma = Tensor4::zeros(Shape4::new(1, s.c, 1, 1));
    let mut gbeta = Tensor4::zeros(Shape4::new(1, s.c, 1, 1));
    let mut gx = Tensor4::zeros(s);
    for c in 0..s.c {
        let mut sum_g = 0.0;
        let mut sum_gxh = 0.0;
        for n in 0..s.n {
            for (&g, &h) in gy.plane(n, c).iter().zip(cache.x_hat.plane(n, c)) {
                sum_g += g;
                sum_gxh += g * h;
            }
        }
        ggamma.data_mut()[c] = sum_gxh;
        gbeta.data_mut()[c] = sum_g;
        let k = gamma.data()[c] * cache.inv_std[c];
        let (mean_g, mean_gxh) = (sum_g / m, sum_gxh / m);
        for n in 0..s.n {
            let xh = cache.x_hat.plane(n, c);
            let g = gy.plane(n, c);
            for ((d, &gv), &h) in gx.plane_mut(n, c).iter_mut().zip(g).zip(xh) {
                *d = k * (gv - mean_g - h * mean_gxh);
            }
        }
    }
    (gx, ggamma, gbeta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn train_mode_output_is_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor4::from_fn(Shape4::new(3, 2, 4, 4), |_, c, _, _| rng.gen_range(-2.0..2.0) + c as f64 * 10.0);
        let gamma = Tensor4::ones(Shape4::new(1, 2, 1, 1));
        let beta = Tensor4::zeros(Shape4::new(1, 2, 1, 1));
        let (y, cache) = batch_norm_train(&x, &gamma, &beta, 0.0).unwrap();
        for c in 0..2 {
            let vals: Vec<f64> = (0..3).flat_map(|n| y.plane(n, c).to_vec()).collect();
            let mu = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mu.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-10);
        }
        assert!((cache.mean[1] - 10.0).abs() < 1.0);
    }

    #[test]
    fn eval_mode_is_affine_in_input() {
        // f(a·x + b) = a·(f(x) − f(0)) + f(b) per channel for frozen statistics
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = Shape4::new(2, 3, 3, 3);
        let x = Tensor4::from_fn(s, |_, _, _, _| rng.gen_range(-1.0..1.0));
        let gamma = Tensor4::from_vec(Shape4::new(1, 3, 1, 1), vec![0.5, 2.0, -1.0]).unwrap();
        let beta = Tensor4::from_vec(Shape4::new(1, 3, 1, 1), vec![0.1, 0.0, 3.0]).unwrap();
        let (rm, rv) = ([0.2, -0.3, 1.0], [1.5, 0.25, 4.0]);
        let f = |t: &Tensor4| batch_norm_eval(t, &gamma, &beta, &rm, &rv, 1e-5).unwrap();
        let (a, b) = (2.5, -0.7);
        let lhs = f(&x.scale(a).add_scalar(b));
        let f0 = f(&Tensor4::zeros(s));
        let fb = f(&Tensor4::full(s, b));
        let fx = f(&x);
        for i in 0..s.numel() {
            let rhs = a * (fx.data()[i] - f0.data()[i]) + fb.data()[i];
            assert!((lhs.data()[i] - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_wrong_affine_shape() {
        let x = Tensor4::zeros(Shape4::new(1, 3, 2, 2));
        let p = Tensor4::zeros(Shape4::new(1, 2, 1, 1));
        assert!(batch_norm_train(&x, &p, &p, 1e-5).is_err());
    }
}
