//! Same-padded, stride-1 grouped 3-D convolution.
//!
//! Weights are stored as a [`Tensor5`] of shape `(C_out, C_in / groups, kt, kh, kw)`.
//! Two implementations exist: a direct loop nest used as the reference, and an
//! im2col + GEMM path used by default. Both produce the same values up to
//! floating-point summation order.

use rayon::prelude::*;

use crate::error::{config_err, dim_err, Result};
use crate::tensor::{Shape5, Tensor5};

/// Geometry of a convolution: kernel extents, dilation and group count.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    /// Kernel extents `(kt, kh, kw)`; each must be odd.
    pub kernel: (usize, usize, usize),
    /// Dilation `(dt, dh, dw)`; each must be at least 1.
    pub dilation: (usize, usize, usize),
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(kernel: (usize, usize, usize)) -> Self {
        Self {
            kernel,
            dilation: (1, 1, 1),
            groups: 1,
        }
    }

    /// A `1 x k x k` spatial kernel.
    pub fn spatial(k: usize, dilation: usize) -> Self {
        Self {
            kernel: (1, k, k),
            dilation: (1, dilation, dilation),
            groups: 1,
        }
    }

    /// A `k x 1 x 1` temporal kernel.
    pub fn temporal(k: usize) -> Self {
        Self::new((k, 1, 1))
    }

    pub fn pointwise() -> Self {
        Self::new((1, 1, 1))
    }

    pub fn with_groups(self, groups: usize) -> Self {
        Self { groups, ..self }
    }

    pub fn with_dilation(self, dilation: (usize, usize, usize)) -> Self {
        Self { dilation, ..self }
    }

    /// Receptive field `(rt, rh, rw)`: `d * (k - 1) + 1` per axis.
    pub fn receptive_field(&self) -> (usize, usize, usize) {
        let rf = |k: usize, d: usize| d * (k - 1) + 1;
        (
            rf(self.kernel.0, self.dilation.0),
            rf(self.kernel.1, self.dilation.1),
            rf(self.kernel.2, self.dilation.2),
        )
    }

    fn pads(&self) -> (usize, usize, usize) {
        let (rt, rh, rw) = self.receptive_field();
        ((rt - 1) / 2, (rh - 1) / 2, (rw - 1) / 2)
    }

    fn kernel_volume(&self) -> usize {
        self.kernel.0 * self.kernel.1 * self.kernel.2
    }

    pub fn validate(&self) -> Result<()> {
        let (kt, kh, kw) = self.kernel;
        for k in [kt, kh, kw] {
            if k == 0 || k % 2 == 0 {
                return Err(config_err!(
                    "kernel extents must be odd and positive, got {:?}",
                    self.kernel
                ));
            }
        }
        let (dt, dh, dw) = self.dilation;
        if dt == 0 || dh == 0 || dw == 0 {
            return Err(config_err!("dilation must be >= 1, got {:?}", self.dilation));
        }
        if self.groups == 0 {
            return Err(config_err!("group count must be >= 1"));
        }
        Ok(())
    }

    /// Weight shape for a convolution mapping `c_in` to `c_out` channels.
    pub fn weight_shape(&self, c_in: usize, c_out: usize) -> Result<Shape5> {
        self.validate()?;
        if !c_in.is_multiple_of(self.groups) || !c_out.is_multiple_of(self.groups) {
            return Err(dim_err!(
                "channels in={c_in} out={c_out} not divisible by groups={}",
                self.groups
            ));
        }
        let (kt, kh, kw) = self.kernel;
        Ok(Shape5::new(c_out, c_in / self.groups, kt, kh, kw))
    }

    /// Checks `input` and `weight` against this spec and returns the output shape.
    pub fn check(&self, input: Shape5, weight: Shape5) -> Result<Shape5> {
        self.validate()?;
        let (kt, kh, kw) = self.kernel;
        if (weight.t, weight.h, weight.w) != (kt, kh, kw) {
            return Err(dim_err!(
                "weight {:?} does not match kernel {:?}",
                weight,
                self.kernel
            ));
        }
        if !input.c.is_multiple_of(self.groups) || !weight.n.is_multiple_of(self.groups) {
            return Err(dim_err!(
                "input channels {} / output channels {} not divisible by groups {}",
                input.c,
                weight.n,
                self.groups
            ));
        }
        if weight.c * self.groups != input.c {
            return Err(dim_err!(
                "weight expects {} input channels per group, input has {} channels in {} groups",
                weight.c,
                input.c,
                self.groups
            ));
        }
        Ok(input.with_c(weight.n))
    }
}

/// Which convolution kernel to run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ConvAlgo {
    /// Straight loop nest; the correctness reference.
    Direct,
    /// im2col followed by a GEMM.
    #[default]
    Im2col,
}

/// Valid output range `[lo, hi)` along one axis for kernel tap offset `off`
/// (already shifted by `-pad`), such that `o + off` stays in `[0, len)`.
#[inline]
fn valid_range(len: usize, off: isize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (len as isize - off).clamp(0, len as isize) as usize;
    (lo.min(hi), hi)
}

struct Geometry {
    s: Shape5,
    cout: usize,
    cin_g: usize,
    cout_g: usize,
    k: (usize, usize, usize),
    d: (usize, usize, usize),
    p: (usize, usize, usize),
}

impl Geometry {
    fn new(spec: &ConvSpec, input: Shape5, weight: Shape5) -> Self {
        Self {
            s: input,
            cout: weight.n,
            cin_g: weight.c,
            cout_g: weight.n / spec.groups,
            k: spec.kernel,
            d: spec.dilation,
            p: spec.pads(),
        }
    }

    #[inline]
    fn tap_offsets(&self, kt: usize, kh: usize, kw: usize) -> (isize, isize, isize) {
        (
            (kt * self.d.0) as isize - self.p.0 as isize,
            (kh * self.d.1) as isize - self.p.1 as isize,
            (kw * self.d.2) as isize - self.p.2 as isize,
        )
    }

    /// Calls `f(out_index_base, in_index_base, len)` for every contiguous
    /// row of the (t, h, w) volume touched by one kernel tap.
    #[inline]
    fn for_each_row(&self, kt: usize, kh: usize, kw: usize, mut f: impl FnMut(usize, usize, usize)) {
        let (ot, oh, ow) = self.tap_offsets(kt, kh, kw);
        let (t0, t1) = valid_range(self.s.t, ot);
        let (h0, h1) = valid_range(self.s.h, oh);
        let (w0, w1) = valid_range(self.s.w, ow);
        if w0 >= w1 {
            return;
        }
        let len = w1 - w0;
        for t in t0..t1 {
            let ti = (t as isize + ot) as usize;
            for h in h0..h1 {
                let hi = (h as isize + oh) as usize;
                let o = (t * self.s.h + h) * self.s.w + w0;
                let i = (ti * self.s.h + hi) * self.s.w + (w0 as isize + ow) as usize;
                f(o, i, len);
            }
        }
    }
}

/// Forward convolution.
pub fn conv3d(input: &Tensor5, weight: &Tensor5, spec: &ConvSpec, algo: ConvAlgo) -> Result<Tensor5> {
    let out_shape = spec.check(input.shape(), weight.shape())?;
    let g = Geometry::new(spec, input.shape(), weight.shape());
    let vol = g.s.volume();
    let mut out = Tensor5::zeros(out_shape);
    let sample_len = g.cout * vol;
    out.data_mut()
        .par_chunks_mut(sample_len)
        .enumerate()
        .for_each(|(n, out_n)| match algo {
            ConvAlgo::Direct => forward_direct(&g, spec, input, weight, n, out_n),
            ConvAlgo::Im2col => forward_im2col(&g, spec, input, weight, n, out_n),
        });
    Ok(out)
}

fn forward_direct(g: &Geometry, spec: &ConvSpec, input: &Tensor5, weight: &Tensor5, n: usize, out_n: &mut [f64]) {
    let vol = g.s.volume();
    let kvol = spec.kernel_volume();
    for co in 0..g.cout {
        let grp = co / g.cout_g;
        let out_c = &mut out_n[co * vol..(co + 1) * vol];
        for cl in 0..g.cin_g {
            let x = input.plane(n, grp * g.cin_g + cl);
            let wbase = (co * g.cin_g + cl) * kvol;
            for kt in 0..g.k.0 {
                for kh in 0..g.k.1 {
                    for kw in 0..g.k.2 {
                        let wv = weight.data()[wbase + (kt * g.k.1 + kh) * g.k.2 + kw];
                        if wv == 0.0 {
                            continue;
                        }
                        g.for_each_row(kt, kh, kw, |o, i, len| {
                            for (y, &xv) in out_c[o..o + len].iter_mut().zip(&x[i..i + len]) {
                                *y += wv * xv;
                            }
                        });
                    }
                }
            }
        }
    }
}

fn is_pointwise(spec: &ConvSpec) -> bool {
    spec.kernel == (1, 1, 1)
}

/// Fills `col` (`cin_g * kvol` rows of `vol` columns) for one group of one sample.
fn im2col(g: &Geometry, input: &Tensor5, n: usize, grp: usize, col: &mut [f64]) {
    let vol = g.s.volume();
    col.fill(0.0);
    let mut row = 0;
    for cl in 0..g.cin_g {
        let x = input.plane(n, grp * g.cin_g + cl);
        for kt in 0..g.k.0 {
            for kh in 0..g.k.1 {
                for kw in 0..g.k.2 {
                    let dst = &mut col[row * vol..(row + 1) * vol];
                    g.for_each_row(kt, kh, kw, |o, i, len| {
                        dst[o..o + len].copy_from_slice(&x[i..i + len]);
                    });
                    row += 1;
                }
            }
        }
    }
}

/// Scatter-adds `col` back into the gradient of one group of one sample.
fn col2im(g: &Geometry, col: &[f64], dx_n: &mut [f64], grp: usize) {
    let vol = g.s.volume();
    let mut row = 0;
    for cl in 0..g.cin_g {
        let c = grp * g.cin_g + cl;
        let dx = &mut dx_n[c * vol..(c + 1) * vol];
        for kt in 0..g.k.0 {
            for kh in 0..g.k.1 {
                for kw in 0..g.k.2 {
                    let src = &col[row * vol..(row + 1) * vol];
                    g.for_each_row(kt, kh, kw, |o, i, len| {
                        for (d, &s) in dx[i..i + len].iter_mut().zip(&src[o..o + len]) {
                            *d += s;
                        }
                    });
                    row += 1;
                }
            }
        }
    }
}

/// `c (m x n) = beta * c + a (m x k) * b (k x n)` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: every operand slice covers the full strided extent described here;
    // callers derive the strides from the same dimensions used to size the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn forward_im2col(g: &Geometry, spec: &ConvSpec, input: &Tensor5, weight: &Tensor5, n: usize, out_n: &mut [f64]) {
    let vol = g.s.volume();
    let kdim = g.cin_g * spec.kernel_volume();
    let mut col = if is_pointwise(spec) { Vec::new() } else { vec![0.0; kdim * vol] };
    let in_n = input.sample(n);
    for grp in 0..spec.groups {
        let b: &[f64] = if is_pointwise(spec) {
            &in_n[grp * g.cin_g * vol..(grp + 1) * g.cin_g * vol]
        } else {
            im2col(g, input, n, grp, &mut col);
            &col
        };
        let w = &weight.data()[grp * g.cout_g * kdim..(grp + 1) * g.cout_g * kdim];
        let c = &mut out_n[grp * g.cout_g * vol..(grp + 1) * g.cout_g * vol];
        gemm(g.cout_g, kdim, vol, w, (kdim, 1), b, (vol, 1), 0.0, c);
    }
}

/// Gradients of a convolution with respect to its input and weight.
///
/// `need_input` / `need_weight` skip work for operands that do not require a gradient.
pub fn conv3d_backward(
    input: &Tensor5,
    weight: &Tensor5,
    grad_out: &Tensor5,
    spec: &ConvSpec,
    algo: ConvAlgo,
    need_input: bool,
    need_weight: bool,
) -> Result<(Option<Tensor5>, Option<Tensor5>)> {
    let out_shape = spec.check(input.shape(), weight.shape())?;
    if grad_out.shape() != out_shape {
        return Err(dim_err!(
            "gradient shape {:?} does not match conv output {:?}",
            grad_out.shape(),
            out_shape
        ));
    }
    let g = Geometry::new(spec, input.shape(), weight.shape());
    let per_sample: Vec<(Vec<f64>, Vec<f64>)> = (0..g.s.n)
        .into_par_iter()
        .map(|n| match algo {
            ConvAlgo::Direct => backward_direct(&g, spec, input, weight, grad_out, n, need_input, need_weight),
            ConvAlgo::Im2col => backward_im2col(&g, spec, input, weight, grad_out, n, need_input, need_weight),
        })
        .collect();

    let dx = need_input.then(|| {
        let mut data = Vec::with_capacity(input.numel());
        for (dxn, _) in &per_sample {
            data.extend_from_slice(dxn);
        }
        Tensor5::from_vec(input.shape(), data).expect("input-shaped gradient")
    });
    let dw = need_weight.then(|| {
        // Fixed-order reduction over the batch keeps results independent of thread count.
        let mut acc = vec![0.0; weight.numel()];
        for (_, dwn) in &per_sample {
            for (a, &v) in acc.iter_mut().zip(dwn) {
                *a += v;
            }
        }
        Tensor5::from_vec(weight.shape(), acc).expect("weight-shaped gradient")
    });
    Ok((dx, dw))
}

#[allow(clippy::too_many_arguments)]
fn backward_direct(
    g: &Geometry,
    spec: &ConvSpec,
    input: &Tensor5,
    weight: &Tensor5,
    grad_out: &Tensor5,
    n: usize,
    need_input: bool,
    need_weight: bool,
) -> (Vec<f64>, Vec<f64>) {
    let vol = g.s.volume();
    let kvol = spec.kernel_volume();
    let mut dx = if need_input { vec![0.0; g.s.c * vol] } else { Vec::new() };
    let mut dw = if need_weight { vec![0.0; weight.numel()] } else { Vec::new() };
    for co in 0..g.cout {
        let grp = co / g.cout_g;
        let gy = grad_out.plane(n, co);
        for cl in 0..g.cin_g {
            let ci = grp * g.cin_g + cl;
            let x = input.plane(n, ci);
            let wbase = (co * g.cin_g + cl) * kvol;
            for kt in 0..g.k.0 {
                for kh in 0..g.k.1 {
                    for kw in 0..g.k.2 {
                        let widx = wbase + (kt * g.k.1 + kh) * g.k.2 + kw;
                        let wv = weight.data()[widx];
                        let mut acc = 0.0;
                        g.for_each_row(kt, kh, kw, |o, i, len| {
                            if need_weight {
                                acc += gy[o..o + len].iter().zip(&x[i..i + len]).map(|(a, b)| a * b).sum::<f64>();
                            }
                            if need_input {
                                let dxc = &mut dx[ci * vol..(ci + 1) * vol];
                                for (d, &gv) in dxc[i..i + len].iter_mut().zip(&gy[o..o + len]) {
                                    *d += wv * gv;
                                }
                            }
                        });
                        if need_weight {
                            dw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}

#[allow(clippy::too_many_arguments)]
fn backward_im2col(
    g: &Geometry,
    spec: &ConvSpec,
    input: &Tensor5,
    weight: &Tensor5,
    grad_out: &Tensor5,
    n: usize,
    need_input: bool,
    need_weight: bool,
) -> (Vec<f64>, Vec<f64>) {
    let vol = g.s.volume();
    let kdim = g.cin_g * spec.kernel_volume();
    let pointwise = is_pointwise(spec);
    let mut dx = if need_input { vec![0.0; g.s.c * vol] } else { Vec::new() };
    let mut dw = if need_weight { vec![0.0; weight.numel()] } else { Vec::new() };
    let mut col = if pointwise { Vec::new() } else { vec![0.0; kdim * vol] };
    let in_n = input.sample(n);
    let gy_n = grad_out.sample(n);
    for grp in 0..spec.groups {
        let gy = &gy_n[grp * g.cout_g * vol..(grp + 1) * g.cout_g * vol];
        let wslice = grp * g.cout_g * kdim..(grp + 1) * g.cout_g * kdim;
        if need_weight {
            let b: &[f64] = if pointwise {
                &in_n[grp * g.cin_g * vol..(grp + 1) * g.cin_g * vol]
            } else {
                im2col(g, input, n, grp, &mut col);
                &col
            };
            // dW (cout_g x kdim) = dY (cout_g x vol) * col^T (vol x kdim)
            gemm(g.cout_g, vol, kdim, gy, (vol, 1), b, (1, vol), 0.0, &mut dw[wslice.clone()]);
        }
        if need_input {
            let w = &weight.data()[wslice];
            if pointwise {
                let dst = &mut dx[grp * g.cin_g * vol..(grp + 1) * g.cin_g * vol];
                gemm(kdim, g.cout_g, vol, w, (1, kdim), gy, (vol, 1), 0.0, dst);
            } else {
                // dcol (kdim x vol) = W^T (kdim x cout_g) * dY (cout_g x vol)
                gemm(kdim, g.cout_g, vol, w, (1, kdim), gy, (vol, 1), 0.0, &mut col);
                col2im(g, &col, &mut dx, grp);
            }
        }
    }
    (dx, dw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ones_kernel(spec: &ConvSpec, cin: usize, cout: usize) -> Tensor5 {
        Tensor5::full(spec.weight_shape(cin, cout).unwrap(), 1.0)
    }

    #[test]
    fn spatial_all_ones_counts_zero_padding() {
        let spec = ConvSpec::spatial(3, 1);
        let x = Tensor5::full([1, 1, 1, 5, 5], 1.0);
        for algo in [ConvAlgo::Direct, ConvAlgo::Im2col] {
            let y = conv3d(&x, &ones_kernel(&spec, 1, 1), &spec, algo).unwrap();
            assert_eq!(y.get(0, 0, 0, 2, 2), 9.0);
            assert_eq!(y.get(0, 0, 0, 0, 0), 4.0);
            assert_eq!(y.get(0, 0, 0, 0, 2), 6.0);
        }
    }

    #[test]
    fn temporal_all_ones_counts_zero_padding() {
        let spec = ConvSpec::temporal(3);
        let x = Tensor5::full([1, 1, 8, 2, 2], 1.0);
        let y = conv3d(&x, &ones_kernel(&spec, 1, 1), &spec, ConvAlgo::Im2col).unwrap();
        assert_eq!(y.get(0, 0, 4, 1, 1), 3.0);
        assert_eq!(y.get(0, 0, 0, 0, 0), 2.0);
        assert_eq!(y.get(0, 0, 7, 0, 1), 2.0);
    }

    #[test]
    fn identity_kernel_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor5::uniform([2, 1, 3, 4, 4], -1.0, 1.0, &mut rng);
        for spec in [ConvSpec::spatial(1, 1), ConvSpec::temporal(1)] {
            for algo in [ConvAlgo::Direct, ConvAlgo::Im2col] {
                let y = conv3d(&x, &ones_kernel(&spec, 1, 1), &spec, algo).unwrap();
                assert!(y.bit_eq(&x));
            }
        }
    }

    #[test]
    fn dilated_impulse_support_has_hollow_ring() {
        let spec = ConvSpec::spatial(3, 2);
        let x = Tensor5::impulse([1, 1, 1, 9, 9], [0, 0, 0, 4, 4]);
        let y = conv3d(&x, &ones_kernel(&spec, 1, 1), &spec, ConvAlgo::Direct).unwrap();
        assert_eq!(y.support_extent(), (1, 5, 5));
        // Taps land on even offsets only; the ring at distance 1 stays zero.
        for (h, w) in [(3, 3), (3, 4), (4, 3), (5, 5), (4, 5)] {
            assert_eq!(y.get(0, 0, 0, h, w), 0.0, "({h},{w})");
        }
        assert_eq!(y.get(0, 0, 0, 2, 2), 1.0);
        assert_eq!(y.get(0, 0, 0, 6, 4), 1.0);
    }

    #[test]
    fn temporal_impulse_support() {
        let spec = ConvSpec::temporal(5);
        let x = Tensor5::impulse([1, 1, 9, 1, 1], [0, 0, 4, 0, 0]);
        let y = conv3d(&x, &ones_kernel(&spec, 1, 1), &spec, ConvAlgo::Im2col).unwrap();
        let nz: Vec<usize> = (0..9).filter(|&t| y.get(0, 0, t, 0, 0) != 0.0).collect();
        assert_eq!(nz, vec![2, 3, 4, 5, 6]);
    }

    #[test]
    fn im2col_matches_direct_on_grouped_dilated_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let specs = [
            ConvSpec::new((3, 3, 3)).with_groups(2),
            ConvSpec::spatial(3, 2).with_groups(3),
            ConvSpec::temporal(5),
            ConvSpec::new((1, 3, 1)).with_dilation((1, 2, 1)),
            ConvSpec::pointwise().with_groups(3),
        ];
        for spec in specs {
            let x = Tensor5::uniform([2, 6, 4, 5, 6], -1.0, 1.0, &mut rng);
            let w = Tensor5::uniform(spec.weight_shape(6, 6).unwrap(), -1.0, 1.0, &mut rng);
            let a = conv3d(&x, &w, &spec, ConvAlgo::Direct).unwrap();
            let b = conv3d(&x, &w, &spec, ConvAlgo::Im2col).unwrap();
            assert!(a.max_rel_dev(&b).unwrap() < 1e-13, "{spec:?}");
            let gy = Tensor5::uniform(a.shape(), -1.0, 1.0, &mut rng);
            let (dxa, dwa) = conv3d_backward(&x, &w, &gy, &spec, ConvAlgo::Direct, true, true).unwrap();
            let (dxb, dwb) = conv3d_backward(&x, &w, &gy, &spec, ConvAlgo::Im2col, true, true).unwrap();
            assert!(dxa.unwrap().max_rel_dev(&dxb.unwrap()).unwrap() < 1e-13);
            assert!(dwa.unwrap().max_rel_dev(&dwb.unwrap()).unwrap() < 1e-13);
        }
    }

    #[test]
    fn conv_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = ConvSpec::new((3, 3, 3)).with_groups(2);
        let w = Tensor5::uniform(spec.weight_shape(4, 4).unwrap(), -1.0, 1.0, &mut rng);
        let x = Tensor5::uniform([1, 4, 4, 4, 4], -1.0, 1.0, &mut rng);
        let y = Tensor5::uniform([1, 4, 4, 4, 4], -1.0, 1.0, &mut rng);
        let (a, b) = (0.7, -1.3);
        let mut mix = x.scale(a);
        mix.axpy(b, &y).unwrap();
        let lhs = conv3d(&mix, &w, &spec, ConvAlgo::Im2col).unwrap();
        let mut rhs = conv3d(&x, &w, &spec, ConvAlgo::Im2col).unwrap().scale(a);
        rhs.axpy(b, &conv3d(&y, &w, &spec, ConvAlgo::Im2col).unwrap()).unwrap();
        assert!(lhs.max_rel_dev(&rhs).unwrap() < 1e-10);
    }

    #[test]
    fn rejects_even_kernels_and_group_mismatch() {
        let x = Tensor5::zeros([1, 3, 2, 4, 4]);
        let even = ConvSpec::spatial(2, 1);
        assert!(matches!(even.validate(), Err(crate::Error::Config(_))));
        let spec = ConvSpec::spatial(3, 1).with_groups(2);
        let w = Tensor5::zeros([2, 1, 1, 3, 3]);
        assert!(matches!(
            conv3d(&x, &w, &spec, ConvAlgo::Direct),
            Err(crate::Error::Dimension(_))
        ));
    }
}
