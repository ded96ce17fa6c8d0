//! Max pooling, average pooling and mean reductions.

use crate::error::{config_err, dim_err, Result};
use crate::tensor::{Shape5, Tensor5};

/// Stride-1 max pooling with same padding; padded cells behave as `-inf`.
///
/// Returns the pooled tensor and, for each output, the flat input offset of
/// the winning element (first maximum in scan order).
pub fn maxpool3d(input: &Tensor5, window: (usize, usize, usize)) -> Result<(Tensor5, Vec<usize>)> {
    let (kt, kh, kw) = window;
    for k in [kt, kh, kw] {
        if k == 0 || k % 2 == 0 {
            return Err(config_err!("max-pool window must be odd, got {window:?}"));
        }
    }
    let s = input.shape();
    let (pt, ph, pw) = (kt / 2, kh / 2, kw / 2);
    let mut out = Tensor5::zeros(s);
    let mut arg = vec![0usize; s.numel()];
    let x = input.data();
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * s.volume();
            for t in 0..s.t {
                let (t0, t1) = (t.saturating_sub(pt), (t + pt + 1).min(s.t));
                for h in 0..s.h {
                    let (h0, h1) = (h.saturating_sub(ph), (h + ph + 1).min(s.h));
                    for w in 0..s.w {
                        let (w0, w1) = (w.saturating_sub(pw), (w + pw + 1).min(s.w));
                        let mut best = f64::NEG_INFINITY;
                        let mut best_i = usize::MAX;
                        for tt in t0..t1 {
                            for hh in h0..h1 {
                                let row = base + (tt * s.h + hh) * s.w;
                                for i in row + w0..row + w1 {
                                    if x[i] > best || best_i == usize::MAX {
                                        best = x[i];
                                        best_i = i;
                                    }
                                }
                            }
                        }
                        let o = base + (t * s.h + h) * s.w + w;
                        out.data_mut()[o] = best;
                        arg[o] = best_i;
                    }
                }
            }
        }
    }
    Ok((out, arg))
}

pub fn maxpool3d_backward(input_shape: Shape5, argmax: &[usize], grad_out: &Tensor5) -> Tensor5 {
    let mut dx = Tensor5::zeros(input_shape);
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        dx.data_mut()[i] += g;
    }
    dx
}

/// Non-overlapping 2x2 spatial average pooling (halves H and W).
pub fn avg_pool_spatial2(input: &Tensor5) -> Result<Tensor5> {
    let s = input.shape();
    if !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) {
        return Err(dim_err!("spatial halving needs even H and W, got {s:?}"));
    }
    let o = Shape5::new(s.n, s.c, s.t, s.h / 2, s.w / 2);
    Ok(Tensor5::from_fn(o, |[n, c, t, h, w]| {
        0.25 * (input.get(n, c, t, 2 * h, 2 * w)
            + input.get(n, c, t, 2 * h, 2 * w + 1)
            + input.get(n, c, t, 2 * h + 1, 2 * w)
            + input.get(n, c, t, 2 * h + 1, 2 * w + 1))
    }))
}

pub fn avg_pool_spatial2_backward(input_shape: Shape5, grad_out: &Tensor5) -> Tensor5 {
    Tensor5::from_fn(input_shape, |[n, c, t, h, w]| 0.25 * grad_out.get(n, c, t, h / 2, w / 2))
}

/// Which of the (T, H, W) axes a mean reduction collapses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Axes {
    pub t: bool,
    pub h: bool,
    pub w: bool,
}

impl Axes {
    pub const THW: Axes = Axes { t: true, h: true, w: true };
    pub const HW: Axes = Axes { t: false, h: true, w: true };
    pub const T: Axes = Axes { t: true, h: false, w: false };

    fn reduced(&self, s: Shape5) -> Shape5 {
        Shape5::new(
            s.n,
            s.c,
            if self.t { 1 } else { s.t },
            if self.h { 1 } else { s.h },
            if self.w { 1 } else { s.w },
        )
    }

    fn count(&self, s: Shape5) -> usize {
        (if self.t { s.t } else { 1 }) * (if self.h { s.h } else { 1 }) * (if self.w { s.w } else { 1 })
    }
}

/// Mean over the selected axes; reduced axes keep extent 1.
pub fn mean_axes(input: &Tensor5, axes: Axes) -> Result<Tensor5> {
    let s = input.shape();
    if s.numel() == 0 {
        return Err(dim_err!("mean of an empty tensor {s:?}"));
    }
    let o = axes.reduced(s);
    let mut out = Tensor5::zeros(o);
    for (i, &v) in input.data().iter().enumerate() {
        let [n, c, t, h, w] = s.unravel(i);
        let j = o.offset(
            n,
            c,
            if axes.t { 0 } else { t },
            if axes.h { 0 } else { h },
            if axes.w { 0 } else { w },
        );
        out.data_mut()[j] += v;
    }
    let inv = 1.0 / axes.count(s) as f64;
    for v in out.data_mut() {
        *v *= inv;
    }
    Ok(out)
}

pub fn mean_axes_backward(input_shape: Shape5, axes: Axes, grad_out: &Tensor5) -> Tensor5 {
    let inv = 1.0 / axes.count(input_shape) as f64;
    Tensor5::from_fn(input_shape, |[n, c, t, h, w]| {
        inv * grad_out.get(
            n,
            c,
            if axes.t { 0 } else { t },
            if axes.h { 0 } else { h },
            if axes.w { 0 } else { w },
        )
    })
}

/// Spatial-temporal average pooling: one value per (sample, channel).
pub fn global_avg_pool(input: &Tensor5) -> Result<Tensor5> {
    mean_axes(input, Axes::THW)
}
