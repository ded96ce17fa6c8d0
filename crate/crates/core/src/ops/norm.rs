//! Batch normalization over (N, T, H, W) per channel.

use crate::error::{dim_err, Result};
use crate::tensor::Tensor5;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch statistics (biased variance).
pub fn channel_stats(x: &Tensor5) -> (Vec<f64>, Vec<f64>) {
    let s = x.shape();
    let m = (s.n * s.volume()) as f64;
    let mut mean = vec![0.0; s.c];
    let mut var = vec![0.0; s.c];
    for (c, mu) in mean.iter_mut().enumerate() {
        *mu = (0..s.n).map(|n| x.plane(n, c).iter().sum::<f64>()).sum::<f64>() / m;
    }
    for (c, v) in var.iter_mut().enumerate() {
        let mu = mean[c];
        *v = (0..s.n)
            .map(|n| x.plane(n, c).iter().map(|&a| (a - mu) * (a - mu)).sum::<f64>())
            .sum::<f64>()
            / m;
    }
    (mean, var)
}

/// Saved state needed by the training-mode backward pass.
pub struct BnTrainCache {
    pub x_hat: Tensor5,
    pub inv_std: Vec<f64>,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

fn check(x: &Tensor5, gamma: &[f64], beta: &[f64]) -> Result<()> {
    let c = x.shape().c;
    if gamma.len() != c || beta.len() != c {
        return Err(dim_err!(
            "batchnorm parameters have {} / {} entries for {} channels",
            gamma.len(),
            beta.len(),
            c
        ));
    }
    Ok(())
}

/// Training mode: normalize with the batch's own statistics.
pub fn batchnorm_train(x: &Tensor5, gamma: &[f64], beta: &[f64]) -> Result<(Tensor5, BnTrainCache)> {
    check(x, gamma, beta)?;
    let s = x.shape();
    let (mean, var) = channel_stats(x);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut x_hat = x.clone();
    let mut y = x.clone();
    for n in 0..s.n {
        for c in 0..s.c {
            let (mu, is, g, b) = (mean[c], inv_std[c], gamma[c], beta[c]);
            for (xh, yv) in x_hat.plane_mut(n, c).iter_mut().zip(y.plane_mut(n, c)) {
                *xh = (*xh - mu) * is;
                *yv = g * *xh + b;
            }
        }
    }
    Ok((
        y,
        BnTrainCache {
            x_hat,
            inv_std,
            batch_mean: mean,
            batch_var: var,
        },
    ))
}

/// Gradients `(dx, dgamma, dbeta)` of the training-mode transform.
pub fn batchnorm_train_backward(cache: &BnTrainCache, gamma: &[f64], grad_out: &Tensor5) -> (Tensor5, Vec<f64>, Vec<f64>) {
    let s = grad_out.shape();
    let m = (s.n * s.volume()) as f64;
    let mut dgamma = vec![0.0; s.c];
    let mut dbeta = vec![0.0; s.c];
    for c in 0..s.c {
        for n in 0..s.n {
            for (&g, &xh) in grad_out.plane(n, c).iter().zip(cache.x_hat.plane(n, c)) {
                dbeta[c] += g;
                dgamma[c] += g * xh;
            }
        }
    }
    let mut dx = Tensor5::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let k = gamma[c] * cache.inv_std[c] / m;
            let (sb, sg) = (dbeta[c], dgamma[c]);
            let dxp = dx.plane_mut(n, c);
            for ((d, &g), &xh) in dxp.iter_mut().zip(grad_out.plane(n, c)).zip(cache.x_hat.plane(n, c)) {
                *d = k * (m * g - sb - xh * sg);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Evaluation mode: a fixed per-channel affine map from stored statistics.
/// Returns the output and the per-channel `1 / sqrt(var + eps)` factors.
pub fn batchnorm_eval(
    x: &Tensor5,
    gamma: &[f64],
    beta: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
) -> Result<(Tensor5, Vec<f64>)> {
    check(x, gamma, beta)?;
    check(x, running_mean, running_var)?;
    let s = x.shape();
    let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut y = x.clone();
    for n in 0..s.n {
        for c in 0..s.c {
            let (mu, is, g, b) = (running_mean[c], inv_std[c], gamma[c], beta[c]);
            for v in y.plane_mut(n, c) {
                *v = g * (*v - mu) * is + b;
            }
        }
    }
    Ok((y, inv_std))
}

/// Exponential moving average update of running statistics.
pub fn update_running(running: &mut [f64], batch: &[f64]) {
    for (r, &b) in running.iter_mut().zip(batch) {
        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
    }
}
