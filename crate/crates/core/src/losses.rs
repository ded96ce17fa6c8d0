//! Fusion regularizers, classification loss and the combined objective.

use crate::error::{dim_err, usage_err, Result};
use crate::fusion::FusionMatrix;
use crate::tensor::{Shape5, Tensor5};

/// Denominator floor for the pooled-group cosine.
pub const COSINE_EPS: f64 = 1e-12;

/// Balancing weights of the two regularizers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Interaction weight.
    pub alpha: f64,
    /// Capacity weight.
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            beta: 0.001,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-(1/G^2) * sum_ij sigmoid(||T_ij||_1)`.
pub fn interaction_loss(t: &FusionMatrix) -> f64 {
    interaction_loss_with_grad(&t.to_tensor()).expect("fusion tensor layout").0
}

/// Interaction loss of a `(G, G, c, 1, 1)` tensor and its gradient.
/// The l1 norm uses absolute values; `sign(0)` is taken as 0.
pub fn interaction_loss_with_grad(t: &Tensor5) -> Result<(f64, Tensor5)> {
    let s = t.shape();
    if s.n != s.c || s.h != 1 || s.w != 1 {
        return Err(dim_err!("fusion tensor must have shape (G, G, c, 1, 1), got {s:?}"));
    }
    let (g, c) = (s.n, s.t);
    let scale = 1.0 / (g * g) as f64;
    let mut loss = 0.0;
    let mut grad = Tensor5::zeros(s);
    for (entry, dst) in t.data().chunks(c).zip(grad.data_mut().chunks_mut(c)) {
        let norm: f64 = entry.iter().map(|v| v.abs()).sum();
        let sg = sigmoid(norm);
        loss -= scale * sg;
        let d = -scale * sg * (1.0 - sg);
        for (o, &v) in dst.iter_mut().zip(entry) {
            *o = if v > 0.0 {
                d
            } else if v < 0.0 {
                -d
            } else {
                0.0
            };
        }
    }
    Ok((loss, grad))
}

/// Value of the capacity loss plus the number of pooled group vectors whose
/// norm fell below the stabilizing floor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CapacityReport {
    pub value: f64,
    pub degenerate_vectors: usize,
    /// Batch mean of the off-diagonal cosines only.
    pub mean_off_diagonal_cosine: f64,
}

/// Pooled group vectors `avg(Y_i)` for each sample: `[n][i][k]`.
fn pooled_groups(y: &Tensor5, groups: usize) -> Result<Vec<Vec<Vec<f64>>>> {
    let s = y.shape();
    if groups == 0 || !s.c.is_multiple_of(groups) {
        return Err(crate::error::config_err!(
            "{} channels cannot be split into {groups} groups",
            s.c
        ));
    }
    if s.volume() == 0 {
        return Err(dim_err!("capacity loss of an empty tensor"));
    }
    let c = s.c / groups;
    let inv = 1.0 / s.volume() as f64;
    Ok((0..s.n)
        .map(|n| {
            (0..groups)
                .map(|i| (0..c).map(|k| y.plane(n, i * c + k).iter().sum::<f64>() * inv).collect())
                .collect()
        })
        .collect())
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `(1/G^2) * sum_ij cos(avg(Y_i), avg(Y_j))`, averaged over the batch.
pub fn capacity_loss(y: &Tensor5, groups: usize) -> Result<CapacityReport> {
    Ok(capacity_loss_with_grad(y, groups)?.0)
}

pub fn capacity_loss_with_grad(y: &Tensor5, groups: usize) -> Result<(CapacityReport, Tensor5)> {
    let pooled = pooled_groups(y, groups)?;
    let s = y.shape();
    let c = s.c / groups;
    let scale = 1.0 / ((groups * groups) as f64 * s.n as f64);
    let mut value = 0.0;
    let mut off = 0.0;
    let mut degenerate = 0;
    let mut grad = Tensor5::zeros(s);
    let inv_vol = 1.0 / s.volume() as f64;
    for (n, p) in pooled.iter().enumerate() {
        let norms: Vec<f64> = p.iter().map(|v| norm2(v)).collect();
        degenerate += norms.iter().filter(|&&v| v < COSINE_EPS).count();
        // d loss / d avg(Y_i)
        let mut dp = vec![vec![0.0; c]; groups];
        for i in 0..groups {
            for j in 0..groups {
                let (a, b) = (&p[i], &p[j]);
                let (na, nb) = (norms[i], norms[j]);
                let den = na * nb + COSINE_EPS;
                let d = dot(a, b);
                let cos = d / den;
                value += scale * cos;
                if i != j {
                    off += cos;
                }
                // d cos / d a = b / den - d * nb * a / (na * den^2), and symmetric in b.
                for k in 0..c {
                    let ga = b[k] / den - if na > 0.0 { d * nb * a[k] / (na * den * den) } else { 0.0 };
                    let gb = a[k] / den - if nb > 0.0 { d * na * b[k] / (nb * den * den) } else { 0.0 };
                    dp[i][k] += scale * ga;
                    dp[j][k] += scale * gb;
                }
            }
        }
        for (i, dpi) in dp.iter().enumerate() {
            for (k, &gv) in dpi.iter().enumerate() {
                let v = gv * inv_vol;
                grad.plane_mut(n, i * c + k).iter_mut().for_each(|o| *o = v);
            }
        }
    }
    let pairs = groups * (groups - 1);
    let mean_off = if pairs == 0 { 0.0 } else { off / (pairs * s.n) as f64 };
    Ok((
        CapacityReport {
            value,
            degenerate_vectors: degenerate,
            mean_off_diagonal_cosine: mean_off,
        },
        grad,
    ))
}

/// Mean negative log-softmax probability of the true class.
pub fn cross_entropy(logits: &Tensor5, labels: &[usize]) -> Result<f64> {
    Ok(cross_entropy_with_grad(logits, labels)?.0)
}

pub fn cross_entropy_with_grad(logits: &Tensor5, labels: &[usize]) -> Result<(f64, Tensor5)> {
    let s = logits.shape();
    if s.volume() != 1 {
        return Err(dim_err!("logits must have shape (N, K, 1, 1, 1), got {s:?}"));
    }
    if labels.len() != s.n {
        return Err(usage_err!("{} labels for a batch of {}", labels.len(), s.n));
    }
    let k = s.c;
    let mut grad = Tensor5::zeros(Shape5::new(s.n, k, 1, 1, 1));
    let mut total = 0.0;
    let inv_n = 1.0 / s.n as f64;
    for (n, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(usage_err!("label {label} out of range for {k} classes"));
        }
        let z = logits.sample(n);
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = z.iter().map(|v| (v - m).exp()).sum();
        let lse = m + sum_exp.ln();
        total += lse - z[label];
        let g = &mut grad.data_mut()[n * k..(n + 1) * k];
        for (c, gv) in g.iter_mut().enumerate() {
            let p = (z[c] - lse).exp();
            *gv = inv_n * (p - if c == label { 1.0 } else { 0.0 });
        }
    }
    Ok((total * inv_n, grad))
}

/// `cls + alpha * mean(interaction) + beta * mean(capacity)` where the means
/// run over the inserted blocks (zero when there are none).
pub fn total_loss(cls: f64, interactions: &[f64], capacities: &[f64], weights: LossWeights) -> f64 {
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    cls + weights.alpha * mean(interactions) + weights.beta * mean(capacities)
}
