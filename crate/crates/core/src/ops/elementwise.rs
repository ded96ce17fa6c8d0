//! Elementwise and channel-manipulation primitives.

use crate::error::{config_err, dim_err, Result};
use crate::tensor::{Shape5, Tensor5};

pub fn add(a: &Tensor5, b: &Tensor5) -> Result<Tensor5> {
    a.zip_map(b, |x, y| x + y)
}

pub fn relu(x: &Tensor5) -> Tensor5 {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

fn check_channel_vector(x: Shape5, weights: &Tensor5) -> Result<()> {
    if weights.shape() != Shape5::channels(x.c) {
        return Err(dim_err!(
            "channel vector {:?} does not broadcast against {:?}",
            weights.shape(),
            x
        ));
    }
    Ok(())
}

/// Multiplies every (t, h, w) volume of channel `c` by `weights[c]`.
pub fn channelwise_mul(x: &Tensor5, weights: &Tensor5) -> Result<Tensor5> {
    let s = x.shape();
    check_channel_vector(s, weights)?;
    let mut y = x.clone();
    for n in 0..s.n {
        for c in 0..s.c {
            let k = weights.data()[c];
            y.plane_mut(n, c).iter_mut().for_each(|v| *v *= k);
        }
    }
    Ok(y)
}

/// Adds `bias[c]` to every element of channel `c`.
pub fn channelwise_add(x: &Tensor5, bias: &Tensor5) -> Result<Tensor5> {
    let s = x.shape();
    check_channel_vector(s, bias)?;
    let mut y = x.clone();
    for n in 0..s.n {
        for c in 0..s.c {
            let k = bias.data()[c];
            y.plane_mut(n, c).iter_mut().for_each(|v| *v += k);
        }
    }
    Ok(y)
}

/// Sums `x` over everything except the channel axis, giving a `(1, C, 1, 1, 1)` tensor.
pub fn sum_to_channels(x: &Tensor5) -> Tensor5 {
    let s = x.shape();
    let mut out = Tensor5::zeros(Shape5::channels(s.c));
    for n in 0..s.n {
        for c in 0..s.c {
            out.data_mut()[c] += x.plane(n, c).iter().sum::<f64>();
        }
    }
    out
}

/// Per-channel `sum(x * y)`, giving a `(1, C, 1, 1, 1)` tensor.
pub fn channel_dot(x: &Tensor5, y: &Tensor5) -> Result<Tensor5> {
    x.expect_same_shape(y)?;
    let s = x.shape();
    let mut out = Tensor5::zeros(Shape5::channels(s.c));
    for n in 0..s.n {
        for c in 0..s.c {
            out.data_mut()[c] += x.plane(n, c).iter().zip(y.plane(n, c)).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    Ok(out)
}

/// Concatenates along the channel axis.
pub fn concat_channels(parts: &[&Tensor5]) -> Result<Tensor5> {
    let first = parts
        .first()
        .ok_or_else(|| dim_err!("concat of zero tensors"))?
        .shape();
    let mut c_total = 0;
    for p in parts {
        let s = p.shape();
        if (s.n, s.t, s.h, s.w) != (first.n, first.t, first.h, first.w) {
            return Err(dim_err!("concat shape mismatch: {:?} vs {:?}", s, first));
        }
        c_total += s.c;
    }
    let out_shape = first.with_c(c_total);
    let mut data = Vec::with_capacity(out_shape.numel());
    for n in 0..first.n {
        for p in parts {
            data.extend_from_slice(p.sample(n));
        }
    }
    Tensor5::from_vec(out_shape, data)
}

/// Channels `[start, start + len)` of `x`.
pub fn narrow_channels(x: &Tensor5, start: usize, len: usize) -> Result<Tensor5> {
    let s = x.shape();
    if start + len > s.c {
        return Err(dim_err!("channel range {start}..{} out of {} channels", start + len, s.c));
    }
    let v = s.volume();
    let mut data = Vec::with_capacity(s.n * len * v);
    for n in 0..s.n {
        let sample = x.sample(n);
        data.extend_from_slice(&sample[start * v..(start + len) * v]);
    }
    Tensor5::from_vec(s.with_c(len), data)
}

/// Splits into `parts` equal channel groups.
pub fn split_groups(x: &Tensor5, parts: usize) -> Result<Vec<Tensor5>> {
    let c = x.shape().c;
    if parts == 0 || !c.is_multiple_of(parts) {
        return Err(config_err!("{c} channels cannot be split into {parts} equal groups"));
    }
    let g = c / parts;
    (0..parts).map(|i| narrow_channels(x, i * g, g)).collect()
}

/// Number of leading channels selected by a `num / den` proportion of `c`.
pub fn proportion_channels(c: usize, num: usize, den: usize) -> Result<usize> {
    if den == 0 || num == 0 || num > den {
        return Err(config_err!("feature proportion {num}/{den} must lie in (0, 1]"));
    }
    if !(c * num).is_multiple_of(den) {
        return Err(config_err!(
            "proportion {num}/{den} of {c} channels is not an integer"
        ));
    }
    Ok(c * num / den)
}

/// Splits into the leading `num / den` share of channels and the remainder.
pub fn split_channels(x: &Tensor5, num: usize, den: usize) -> Result<(Tensor5, Tensor5)> {
    let s = x.shape();
    let k = proportion_channels(s.c, num, den)?;
    Ok((narrow_channels(x, 0, k)?, narrow_channels(x, k, s.c - k)?))
}
