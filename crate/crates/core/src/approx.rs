//! The chain of kernel approximations leading to the synthesizer, evaluated
//! literally with dense direct convolutions, plus receptive-field probes and
//! parameter accounting.

use std::fmt;
use std::io::Write;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, dim_err, usage_err, Result};
use crate::fusion::RankOnePair;
use crate::ops::conv::{conv3d, ConvAlgo, ConvSpec};
use crate::ops::elementwise::{channelwise_mul, concat_channels, split_groups};
use crate::tensor::{Shape5, Tensor5};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FormKind {
    LargeKernel,
    StackedSmall,
    MultiScaleSum,
    GroupedMultiScale,
    SeparableFull,
    RankOneSeparable,
}

impl FormKind {
    pub const ALL: [FormKind; 6] = [
        FormKind::LargeKernel,
        FormKind::StackedSmall,
        FormKind::MultiScaleSum,
        FormKind::GroupedMultiScale,
        FormKind::SeparableFull,
        FormKind::RankOneSeparable,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FormKind::LargeKernel => "large-kernel",
            FormKind::StackedSmall => "stacked-small",
            FormKind::MultiScaleSum => "multi-scale-sum",
            FormKind::GroupedMultiScale => "grouped-multi-scale",
            FormKind::SeparableFull => "separable-full",
            FormKind::RankOneSeparable => "rank-one-separable",
        }
    }
}

impl fmt::Display for FormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One approximation of an `L x L x L` kernel, with its weights.
///
/// Spatial kernels in the separable forms are dense over channels; temporal
/// kernels act on each channel separately so that channel weights commute
/// with them.
#[derive(Clone, Debug)]
pub enum ApproxForm {
    /// `U * F`, `F` of shape `(C, C, L, L, L)`.
    LargeKernel { kernel: Tensor5 },
    /// `U * F_1 * ... * F_n` with `3 x 3 x 3` kernels.
    StackedSmall { kernels: Vec<Tensor5> },
    /// `sum_n w_n * (U * F_n)` with cube kernels of sizes `1, 3, ..., L`.
    MultiScaleSum { kernels: Vec<Tensor5>, weights: Vec<Vec<f64>> },
    /// `(U_1 * F_1) + ... + (U_G * F_G)` concatenated, `F_j` of shape `(c, c, k, k, k)`.
    GroupedMultiScale { kernels: Vec<Tensor5> },
    /// `sum_ij WW_ij * ((U * Fs_j) * Ft_i)`.
    SeparableFull { spatial: Vec<Tensor5>, temporal: Vec<Tensor5>, grid: Vec<Vec<Vec<f64>>> },
    /// `sum_i W'(i) * ((sum_j W(j) * (U * Fs_j)) * Ft_i)`.
    RankOneSeparable { spatial: Vec<Tensor5>, temporal: Vec<Tensor5>, factors: RankOnePair },
}

fn cube(k: usize) -> ConvSpec {
    ConvSpec::new((k, k, k))
}

fn depthwise(k: usize, c: usize) -> ConvSpec {
    ConvSpec::temporal(k).with_groups(c)
}

fn conv(u: &Tensor5, w: &Tensor5, spec: ConvSpec) -> Result<Tensor5> {
    conv3d(u, w, &spec, ConvAlgo::Direct)
}

fn odd_extent(w: &Tensor5, axis: usize) -> usize {
    w.shape().dims()[axis]
}

fn weight_vector(v: &[f64]) -> Tensor5 {
    Tensor5::from_vec(Shape5::channels(v.len()), v.to_vec()).expect("vector length")
}

fn accumulate(acc: &mut Option<Tensor5>, t: Tensor5) -> Result<()> {
    match acc {
        Some(a) => a.axpy(1.0, &t),
        None => {
            *acc = Some(t);
            Ok(())
        }
    }
}

impl ApproxForm {
    pub fn kind(&self) -> FormKind {
        match self {
            ApproxForm::LargeKernel { .. } => FormKind::LargeKernel,
            ApproxForm::StackedSmall { .. } => FormKind::StackedSmall,
            ApproxForm::MultiScaleSum { .. } => FormKind::MultiScaleSum,
            ApproxForm::GroupedMultiScale { .. } => FormKind::GroupedMultiScale,
            ApproxForm::SeparableFull { .. } => FormKind::SeparableFull,
            ApproxForm::RankOneSeparable { .. } => FormKind::RankOneSeparable,
        }
    }

    /// Random weights in `[lo, hi]` for a form on `c` channels with maximum
    /// receptive field `l`; the multi-scale forms use `G = (l + 1) / 2` scales.
    pub fn random(kind: FormKind, c: usize, l: usize, lo: f64, hi: f64, rng: &mut impl Rng) -> Result<Self> {
        if l == 0 || l.is_multiple_of(2) {
            return Err(config_err!("maximum receptive field must be odd, got {l}"));
        }
        let g = l.div_ceil(2);
        let sizes: Vec<usize> = (0..g).map(|j| 2 * j + 1).collect();
        let mut u = |shape: Shape5| Tensor5::uniform(shape, lo, hi, rng);
        let form = match kind {
            FormKind::LargeKernel => ApproxForm::LargeKernel {
                kernel: u(Shape5::new(c, c, l, l, l)),
            },
            FormKind::StackedSmall => ApproxForm::StackedSmall {
                kernels: (0..(l - 1) / 2).map(|_| u(Shape5::new(c, c, 3, 3, 3))).collect(),
            },
            FormKind::MultiScaleSum => {
                let kernels = sizes.iter().map(|&k| u(Shape5::new(c, c, k, k, k))).collect();
                let weights = sizes.iter().map(|_| u(Shape5::channels(c)).into_data()).collect();
                ApproxForm::MultiScaleSum { kernels, weights }
            }
            FormKind::GroupedMultiScale => {
                if !c.is_multiple_of(g) {
                    return Err(config_err!("{c} channels cannot be split into {g} groups"));
                }
                let cg = c / g;
                ApproxForm::GroupedMultiScale {
                    kernels: sizes.iter().map(|&k| u(Shape5::new(cg, cg, k, k, k))).collect(),
                }
            }
            FormKind::SeparableFull | FormKind::RankOneSeparable => {
                let spatial: Vec<Tensor5> = sizes.iter().map(|&k| u(Shape5::new(c, c, 1, k, k))).collect();
                let temporal: Vec<Tensor5> = sizes.iter().map(|&k| u(Shape5::new(c, 1, k, 1, 1))).collect();
                let w_prime: Vec<Vec<f64>> = (0..g).map(|_| u(Shape5::channels(c)).into_data()).collect();
                let w: Vec<Vec<f64>> = (0..g).map(|_| u(Shape5::channels(c)).into_data()).collect();
                let factors = RankOnePair::new(w_prime, w)?;
                if kind == FormKind::SeparableFull {
                    ApproxForm::SeparableFull {
                        spatial,
                        temporal,
                        grid: factors.product(),
                    }
                } else {
                    ApproxForm::RankOneSeparable {
                        spatial,
                        temporal,
                        factors,
                    }
                }
            }
        };
        Ok(form)
    }

    /// Every weight tensor of the form, channel weight vectors included.
    pub fn weights(&self) -> Vec<Tensor5> {
        match self {
            ApproxForm::LargeKernel { kernel } => vec![kernel.clone()],
            ApproxForm::StackedSmall { kernels } | ApproxForm::GroupedMultiScale { kernels } => kernels.clone(),
            ApproxForm::MultiScaleSum { kernels, weights } => kernels
                .iter()
                .cloned()
                .chain(weights.iter().map(|w| weight_vector(w)))
                .collect(),
            ApproxForm::SeparableFull { spatial, temporal, grid } => spatial
                .iter()
                .chain(temporal)
                .cloned()
                .chain(grid.iter().flatten().map(|w| weight_vector(w)))
                .collect(),
            ApproxForm::RankOneSeparable {
                spatial,
                temporal,
                factors,
            } => spatial
                .iter()
                .chain(temporal)
                .cloned()
                .chain(factors.w_prime.iter().chain(&factors.w).map(|w| weight_vector(w)))
                .collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights().iter().map(Tensor5::numel).sum()
    }
}

fn separable_check(spatial: &[Tensor5], temporal: &[Tensor5], g: usize) -> Result<()> {
    if spatial.len() != g || temporal.len() != g {
        return Err(config_err!(
            "separable form needs {g} spatial and temporal kernels, got {} and {}",
            spatial.len(),
            temporal.len()
        ));
    }
    Ok(())
}

/// Evaluates `form` on `u` with same padding.
pub fn eval_form(form: &ApproxForm, u: &Tensor5) -> Result<Tensor5> {
    let c = u.shape().c;
    match form {
        ApproxForm::LargeKernel { kernel } => conv(u, kernel, cube(odd_extent(kernel, 2))),
        ApproxForm::StackedSmall { kernels } => {
            let mut h = u.clone();
            for k in kernels {
                h = conv(&h, k, cube(3))?;
            }
            Ok(h)
        }
        ApproxForm::MultiScaleSum { kernels, weights } => {
            if kernels.len() != weights.len() || kernels.is_empty() {
                return Err(config_err!("multi-scale sum needs one weight vector per kernel"));
            }
            let mut acc = None;
            for (k, w) in kernels.iter().zip(weights) {
                let y = conv(u, k, cube(odd_extent(k, 2)))?;
                accumulate(&mut acc, channelwise_mul(&y, &weight_vector(w))?)?;
            }
            Ok(acc.expect("nonempty"))
        }
        ApproxForm::GroupedMultiScale { kernels } => {
            if kernels.is_empty() {
                return Err(config_err!("grouped form needs at least one kernel"));
            }
            let parts = split_groups(u, kernels.len())?;
            let outs = parts
                .iter()
                .zip(kernels)
                .map(|(p, k)| conv(p, k, cube(odd_extent(k, 2))))
                .collect::<Result<Vec<_>>>()?;
            concat_channels(&outs.iter().collect::<Vec<_>>())
        }
        ApproxForm::SeparableFull { spatial, temporal, grid } => {
            let g = grid.len();
            separable_check(spatial, temporal, g)?;
            let xs = spatial
                .iter()
                .map(|f| conv(u, f, ConvSpec::spatial(odd_extent(f, 3), 1)))
                .collect::<Result<Vec<_>>>()?;
            let mut acc = None;
            for (i, ft) in temporal.iter().enumerate() {
                for (j, x) in xs.iter().enumerate() {
                    let weighted = channelwise_mul(x, &weight_vector(&grid[i][j]))?;
                    accumulate(&mut acc, conv(&weighted, ft, depthwise(odd_extent(ft, 2), c))?)?;
                }
            }
            Ok(acc.expect("nonempty"))
        }
        ApproxForm::RankOneSeparable {
            spatial,
            temporal,
            factors,
        } => {
            let g = factors.groups();
            separable_check(spatial, temporal, g)?;
            let mut inner = None;
            for (f, w) in spatial.iter().zip(&factors.w) {
                let x = conv(u, f, ConvSpec::spatial(odd_extent(f, 3), 1))?;
                accumulate(&mut inner, channelwise_mul(&x, &weight_vector(w))?)?;
            }
            let inner = inner.expect("nonempty");
            let mut acc = None;
            for (ft, wp) in temporal.iter().zip(&factors.w_prime) {
                let y = conv(&inner, ft, depthwise(odd_extent(ft, 2), c))?;
                accumulate(&mut acc, channelwise_mul(&y, &weight_vector(wp))?)?;
            }
            Ok(acc.expect("nonempty"))
        }
    }
}

/// Evaluates the full-grid separable form built from `factors.product()` and
/// the factored form on the same kernels; returns the maximum relative
/// deviation between the two outputs.
pub fn check_rank1_equivalence(
    factors: &RankOnePair,
    spatial: &[Tensor5],
    temporal: &[Tensor5],
    u: &Tensor5,
) -> Result<f64> {
    let full = ApproxForm::SeparableFull {
        spatial: spatial.to_vec(),
        temporal: temporal.to_vec(),
        grid: factors.product(),
    };
    let factored = ApproxForm::RankOneSeparable {
        spatial: spatial.to_vec(),
        temporal: temporal.to_vec(),
        factors: factors.clone(),
    };
    eval_form(&factored, u)?.max_rel_dev(&eval_form(&full, u)?)
}

/// One step of a composition probed by [`measure_receptive_field`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CompositionOp {
    Conv(ConvSpec),
    MaxPool((usize, usize, usize)),
    Relu,
    BatchNorm,
}

/// Bounding box `(rt, rh, rw)` of the response of a single-channel linear
/// composition to a centered unit impulse. Kernels are drawn positive so
/// that no tap cancels.
pub fn measure_receptive_field(ops: &[CompositionOp]) -> Result<(usize, usize, usize)> {
    let mut reach = (0, 0, 0);
    let mut specs = Vec::with_capacity(ops.len());
    for op in ops {
        match op {
            CompositionOp::Conv(spec) => {
                spec.validate()?;
                if spec.groups != 1 {
                    return Err(usage_err!("receptive-field probes use single-channel kernels"));
                }
                let (rt, rh, rw) = spec.receptive_field();
                reach = (reach.0 + rt - 1, reach.1 + rh - 1, reach.2 + rw - 1);
                specs.push(*spec);
            }
            other => return Err(usage_err!("{other:?} is not linear; receptive fields are measured on linear compositions")),
        }
    }
    // Clip extent leaves a margin of one voxel beyond the furthest tap.
    let shape = Shape5::new(1, 1, reach.0 + 3, reach.1 + 3, reach.2 + 3);
    let centre = [0, 0, shape.t / 2, shape.h / 2, shape.w / 2];
    let mut x = Tensor5::impulse(shape, centre);
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    for spec in specs {
        let (kt, kh, kw) = spec.kernel;
        let w = Tensor5::uniform(Shape5::new(1, 1, kt, kh, kw), 0.1, 1.0, &mut rng);
        x = conv(&x, &w, spec)?;
    }
    Ok(x.support_extent())
}

/// Closed-form `(parameters, multiply-adds per output position)` of a form
/// on `c` channels with maximum receptive field `l` and `g` scales.
pub fn count_params_flops(kind: FormKind, c: usize, l: usize, g: usize) -> Result<(usize, usize)> {
    if l == 0 || l.is_multiple_of(2) {
        return Err(config_err!("maximum receptive field must be odd, got {l}"));
    }
    if g == 0 {
        return Err(dim_err!("scale count must be positive"));
    }
    let sizes = || (0..g).map(|j| 2 * j + 1);
    let counts = match kind {
        FormKind::LargeKernel => {
            let p = c * c * l * l * l;
            (p, p)
        }
        FormKind::StackedSmall => {
            let p = (l - 1) / 2 * c * c * 27;
            (p, p)
        }
        FormKind::MultiScaleSum => {
            let conv: usize = sizes().map(|k| c * c * k * k * k).sum();
            (conv + g * c, conv + g * c)
        }
        FormKind::GroupedMultiScale => {
            if !c.is_multiple_of(g) {
                return Err(config_err!("{c} channels cannot be split into {g} groups"));
            }
            let cg = c / g;
            let p: usize = sizes().map(|k| cg * cg * k * k * k).sum();
            (p, p)
        }
        FormKind::SeparableFull => {
            let spatial: usize = sizes().map(|k| c * c * k * k).sum();
            let temporal: usize = sizes().map(|k| c * k).sum();
            // Every (i, j) pair is weighted and filtered separately.
            let flops = spatial + g * g * c + g * temporal;
            (spatial + temporal + g * g * c, flops)
        }
        FormKind::RankOneSeparable => {
            let spatial: usize = sizes().map(|k| c * c * k * k).sum();
            let temporal: usize = sizes().map(|k| c * k).sum();
            (spatial + temporal + 2 * g * c, spatial + temporal + 2 * g * c)
        }
    };
    Ok(counts)
}

/// One row of the approximation-chain verification report.
#[derive(Clone, Debug, PartialEq)]
pub struct ApproxCheck {
    pub form: &'static str,
    pub check: String,
    pub deviation: f64,
    pub tolerance: f64,
}

impl ApproxCheck {
    pub fn passed(&self) -> bool {
        self.deviation.is_finite() && self.deviation <= self.tolerance
    }
}

fn row(form: FormKind, check: impl Into<String>, deviation: f64, tolerance: f64) -> ApproxCheck {
    ApproxCheck {
        form: form.name(),
        check: check.into(),
        deviation,
        tolerance,
    }
}

fn extent_mismatch(a: (usize, usize, usize), b: (usize, usize, usize)) -> f64 {
    (a.0.abs_diff(b.0) + a.1.abs_diff(b.1) + a.2.abs_diff(b.2)) as f64
}

/// Runs the approximation-chain checks on seeded random instances.
pub fn verification_report(seed: u64) -> Result<Vec<ApproxCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let c = 4;

    let u = Tensor5::uniform([1, c, 5, 7, 7], -1.0, 1.0, &mut rng);
    let identity = Tensor5::from_fn([c, c, 1, 1, 1], |[o, i, ..]| if o == i { 1.0 } else { 0.0 });
    let y = eval_form(&ApproxForm::LargeKernel { kernel: identity.clone() }, &u)?;
    rows.push(row(FormKind::LargeKernel, "identity kernel", y.max_abs_diff(&u)?, 0.0));

    for n in 1..=3 {
        let spec = CompositionOp::Conv(cube(3));
        let got = measure_receptive_field(&vec![spec; n])?;
        let want = (2 * n + 1, 2 * n + 1, 2 * n + 1);
        rows.push(row(FormKind::StackedSmall, format!("support of {n} stacked 3x3x3"), extent_mismatch(got, want), 0.0));
    }
    let d2 = measure_receptive_field(&[CompositionOp::Conv(ConvSpec::spatial(3, 2))])?;
    rows.push(row(FormKind::StackedSmall, "support of 3x3 dilation 2", extent_mismatch(d2, (1, 5, 5)), 0.0));

    if let ApproxForm::MultiScaleSum { kernels, mut weights } = ApproxForm::random(FormKind::MultiScaleSum, c, 5, -1.0, 1.0, &mut rng)? {
        for (n, w) in weights.iter_mut().enumerate() {
            w.fill(if n == 1 { 1.0 } else { 0.0 });
        }
        let single = conv(&u, &kernels[1], cube(3))?;
        let y = eval_form(&ApproxForm::MultiScaleSum { kernels, weights }, &u)?;
        rows.push(row(FormKind::MultiScaleSum, "single active scale", y.max_abs_diff(&single)?, 0.0));
    }

    let g = 2;
    let cg = c / g;
    let grouped = ApproxForm::random(FormKind::GroupedMultiScale, c, 3, -1.0, 1.0, &mut rng)?;
    if let ApproxForm::GroupedMultiScale { kernels } = &grouped {
        // Block-diagonal dense kernels with one-hot scale weights reproduce the grouped form.
        let mut dense = Vec::new();
        let mut weights = Vec::new();
        for (j, k) in kernels.iter().enumerate() {
            let ks = odd_extent(k, 2);
            let blown = Tensor5::from_fn([c, c, ks, ks, ks], |[o, i, t, h, w]| {
                if o / cg == j && i / cg == j {
                    k.get(o % cg, i % cg, t, h, w)
                } else {
                    0.0
                }
            });
            dense.push(blown);
            weights.push((0..c).map(|o| if o / cg == j { 1.0 } else { 0.0 }).collect());
        }
        let sum = eval_form(&ApproxForm::MultiScaleSum { kernels: dense, weights }, &u)?;
        let y = eval_form(&grouped, &u)?;
        rows.push(row(FormKind::GroupedMultiScale, "equals constrained multi-scale sum", y.max_rel_dev(&sum)?, 1e-10));
    }
    let ident_groups = ApproxForm::GroupedMultiScale {
        kernels: vec![Tensor5::from_fn([cg, cg, 1, 1, 1], |[o, i, ..]| if o == i { 1.0 } else { 0.0 }); g],
    };
    rows.push(row(FormKind::GroupedMultiScale, "identity kernels", eval_form(&ident_groups, &u)?.max_abs_diff(&u)?, 0.0));

    let mut worst: f64 = 0.0;
    for (k, groups) in [1usize, 2, 4].into_iter().cycle().take(12).enumerate() {
        let l = 2 * groups - 1;
        let ApproxForm::RankOneSeparable { spatial, temporal, factors } =
            ApproxForm::random(FormKind::RankOneSeparable, 4 + 2 * (k % 3), l, -1.0, 1.0, &mut rng)?
        else {
            unreachable!()
        };
        let x = Tensor5::uniform([1 + k % 2, factors.w[0].len(), 4, 6, 6], -1.0, 1.0, &mut rng);
        worst = worst.max(check_rank1_equivalence(&factors, &spatial, &temporal, &x)?);
    }
    rows.push(row(FormKind::RankOneSeparable, "matches full separable grid", worst, 1e-10));

    for kind in FormKind::ALL {
        let (c, l) = (6, 5);
        let form = ApproxForm::random(kind, c, l, -1.0, 1.0, &mut rng)?;
        let (params, _) = count_params_flops(kind, c, l, l.div_ceil(2))?;
        rows.push(row(kind, "closed-form parameter count", params.abs_diff(form.param_count()) as f64, 0.0));
    }
    Ok(rows)
}

pub fn write_report_text(rows: &[ApproxCheck], mut out: impl Write) -> Result<()> {
    for r in rows {
        writeln!(
            out,
            "{:<4} {:<22} {:<40} deviation={:.3e} tolerance={:.1e}",
            if r.passed() { "PASS" } else { "FAIL" },
            r.form,
            r.check,
            r.deviation,
            r.tolerance
        )?;
    }
    Ok(())
}

pub fn write_report_csv(rows: &[ApproxCheck], mut out: impl Write) -> Result<()> {
    writeln!(out, "form,check,deviation,pass")?;
    for r in rows {
        writeln!(out, "{},{},{:e},{}", r.form, r.check, r.deviation, r.passed())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stacked_small_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let form = ApproxForm::random(FormKind::StackedSmall, 1, 5, 0.1, 1.0, &mut rng).unwrap();
        let u = Tensor5::impulse([1, 1, 9, 9, 9], [0, 0, 4, 4, 4]);
        assert_eq!(eval_form(&form, &u).unwrap().support_extent(), (5, 5, 5));
    }

    #[test]
    fn receptive_field_probes() {
        assert_eq!(measure_receptive_field(&[CompositionOp::Conv(cube(3)); 2]).unwrap(), (5, 5, 5));
        assert_eq!(measure_receptive_field(&[CompositionOp::Conv(ConvSpec::spatial(3, 2))]).unwrap(), (1, 5, 5));
        assert_eq!(measure_receptive_field(&[CompositionOp::Conv(ConvSpec::pointwise())]).unwrap(), (1, 1, 1));
        let err = measure_receptive_field(&[CompositionOp::Conv(cube(3)), CompositionOp::Relu]);
        assert!(matches!(err, Err(crate::Error::Usage(_))));
    }

    #[test]
    fn parameter_counts() {
        let enumerate = |c: usize, l: usize| {
            let mut n = 0;
            for _o in 0..c {
                for _i in 0..c {
                    for _t in 0..l {
                        for _h in 0..l {
                            for _w in 0..l {
                                n += 1;
                            }
                        }
                    }
                }
            }
            n
        };
        assert_eq!(count_params_flops(FormKind::LargeKernel, 4, 5, 3).unwrap().0, 2000);
        assert_eq!(enumerate(4, 5), 2000);
        assert_eq!(count_params_flops(FormKind::LargeKernel, 8, 5, 3).unwrap().0, 8000);
        assert_eq!(enumerate(8, 5), 8000);
        assert_eq!(count_params_flops(FormKind::LargeKernel, 4, 1, 1).unwrap().0, 16);
        let dense = cube(3).weight_shape(8, 8).unwrap().numel();
        let grouped = cube(3).with_groups(4).weight_shape(8, 8).unwrap().numel();
        assert_eq!(grouped * 4, dense);
    }

    #[test]
    fn rank_one_degenerate_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ApproxForm::RankOneSeparable { spatial, temporal, mut factors } =
            ApproxForm::random(FormKind::RankOneSeparable, 3, 1, -1.0, 1.0, &mut rng).unwrap()
        else {
            unreachable!()
        };
        let u = Tensor5::uniform([1, 3, 4, 4, 4], -1.0, 1.0, &mut rng);
        assert!(check_rank1_equivalence(&factors, &spatial, &temporal, &u).unwrap() <= 1e-12);
        for w in &mut factors.w_prime {
            w.fill(0.0);
        }
        let full = ApproxForm::SeparableFull {
            spatial: spatial.clone(),
            temporal: temporal.clone(),
            grid: factors.product(),
        };
        assert_eq!(eval_form(&full, &u).unwrap().max_abs(), 0.0);
        assert_eq!(check_rank1_equivalence(&factors, &spatial, &temporal, &u).unwrap(), 0.0);
    }

    #[test]
    fn report_passes_and_formats() {
        let rows = verification_report(1).unwrap();
        for r in &rows {
            assert!(r.passed(), "{r:?}");
        }
        let mut csv = Vec::new();
        write_report_csv(&rows, &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), rows.len() + 1);
        assert!(text.starts_with("form,check,deviation,pass\n"));
    }
}
