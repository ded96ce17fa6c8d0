//! Property suite behind `ksynth verify`: every check reports a measured
//! deviation against a tolerance. Also hosts the finite-difference gradient
//! checker used by the tests.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::approx;
use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::fusion::{FusionMatrix, IR_EPS};
use crate::losses;
use crate::ops::conv::{conv3d, ConvAlgo, ConvSpec};
use crate::ops::elementwise;
use crate::ops::pool::Axes;
use crate::params::{Ctx, ParamStore};
use crate::synth::{FusionMode, InitPolicy, SynthesizerBlock, SynthesizerConfig};
use crate::tensor::Tensor5;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Maximum relative error between analytic and numeric directional derivatives.
pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_PROBES: usize = 20;
/// Relative-error denominators are floored here so that vanishing
/// derivatives are compared absolutely.
const GRAD_FLOOR: f64 = 1e-6;
const EQUIV_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub module: &'static str,
    pub name: String,
    pub deviation: f64,
    pub tolerance: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.deviation.is_finite() && self.deviation <= self.tolerance
    }
}

/// Deliberate defects for exercising the failure path.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Perturbs one kernel weight on the im2col path before it is compared
    /// with the direct convolution.
    KernelWeight,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct VerifyOptions {
    pub seed: u64,
    pub fault: Option<Fault>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub probes: usize,
    pub max_rel_err: f64,
}

type Graph<'a> = dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>> + 'a;

fn weighted_output<'t>(f: &Graph<'_>, tape: &'t Tape, inputs: &[Var<'t>], r: &Tensor5) -> Result<Var<'t>> {
    f(tape, inputs)?.weighted_sum(r)
}

/// Compares the tape's gradient of `sum(R * f(inputs))` with central
/// differences along `probes` random directions, where `R` is a fixed random
/// tensor of the output's shape.
pub fn gradcheck(
    f: impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
    inputs: &[Tensor5],
    probes: usize,
    seed: u64,
) -> Result<GradReport> {
    gradcheck_with(ConvAlgo::default(), f, inputs, probes, seed)
}

/// [`gradcheck`] on tapes that run convolutions with `algo`.
pub fn gradcheck_with(
    algo: ConvAlgo,
    f: impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
    inputs: &[Tensor5],
    probes: usize,
    seed: u64,
) -> Result<GradReport> {
    let f: &Graph<'_> = &f;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = {
        let tape = Tape::with_algo(algo);
        let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        f(&tape, &vars)?.shape()
    };
    let r = Tensor5::uniform(shape, -1.0, 1.0, &mut rng);

    let grads: Vec<Tensor5> = {
        let tape = Tape::with_algo(algo);
        let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
        let loss = weighted_output(f, &tape, &vars, &r)?;
        let g = tape.backward(loss)?;
        vars.iter().map(|&v| g.of(v)).collect()
    };

    let eval = |xs: &[Tensor5]| -> Result<f64> {
        let tape = Tape::with_algo(algo);
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        weighted_output(f, &tape, &vars, &r)?.item()
    };

    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let dirs: Vec<Tensor5> = inputs.iter().map(|x| Tensor5::uniform(x.shape(), -1.0, 1.0, &mut rng)).collect();
        let mut analytic = 0.0;
        for (g, d) in grads.iter().zip(&dirs) {
            analytic += g.dot(d)?;
        }
        let shifted = |sign: f64| -> Result<Vec<Tensor5>> {
            inputs
                .iter()
                .zip(&dirs)
                .map(|(x, d)| x.zip_map(d, |a, b| a + sign * FD_STEP * b))
                .collect()
        };
        let numeric = (eval(&shifted(1.0)?)? - eval(&shifted(-1.0)?)?) / (2.0 * FD_STEP);
        let denom = analytic.abs().max(numeric.abs()).max(GRAD_FLOOR);
        let err = (analytic - numeric).abs() / denom;
        worst = if err.is_nan() { f64::NAN } else { worst.max(err) };
        if worst.is_nan() {
            break;
        }
    }
    Ok(GradReport {
        probes,
        max_rel_err: worst,
    })
}

fn uniform(shape: [usize; 5], rng: &mut ChaCha8Rng) -> Tensor5 {
    Tensor5::uniform(shape, -1.0, 1.0, rng)
}

fn bool_dev(ok: bool) -> f64 {
    if ok {
        0.0
    } else {
        1.0
    }
}

struct Suite {
    rows: Vec<Check>,
    rng: ChaCha8Rng,
}

impl Suite {
    fn push(&mut self, module: &'static str, name: impl Into<String>, deviation: f64, tolerance: f64) {
        self.rows.push(Check {
            module,
            name: name.into(),
            deviation,
            tolerance,
        });
    }

    fn grad(
        &mut self,
        name: &str,
        inputs: &[Tensor5],
        f: impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
    ) -> Result<()> {
        self.grad_with(ConvAlgo::default(), name, inputs, f)
    }

    fn grad_with(
        &mut self,
        algo: ConvAlgo,
        name: &str,
        inputs: &[Tensor5],
        f: impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
    ) -> Result<()> {
        let seed = self.rng.random();
        let r = gradcheck_with(algo, f, inputs, GRAD_PROBES, seed)?;
        let module = if name.ends_with("loss") || name == "cross_entropy" { "losses" } else { "tensor-core" };
        self.push(module, format!("gradient {name}"), r.max_rel_err, GRAD_TOL);
        Ok(())
    }
}

fn tensor_core(s: &mut Suite, fault: Option<Fault>) -> Result<()> {
    let specs = [
        ConvSpec::new((3, 3, 3)),
        ConvSpec::spatial(3, 2),
        ConvSpec::temporal(5),
        ConvSpec::new((1, 3, 1)).with_dilation((1, 3, 1)),
        ConvSpec::spatial(3, 1).with_groups(2),
    ];
    for spec in specs {
        let (ci, co) = (4, 4);
        let w = uniform(spec.weight_shape(ci, co)?.dims(), &mut s.rng);
        let x = uniform([2, ci, 5, 9, 9], &mut s.rng);
        let y = uniform([2, ci, 5, 9, 9], &mut s.rng);
        let (a, b) = (0.7, -1.3);
        let lhs = conv3d(&x.zip_map(&y, |p, q| a * p + b * q)?, &w, &spec, ConvAlgo::Direct)?;
        let rhs = conv3d(&x, &w, &spec, ConvAlgo::Direct)?
            .scale(a)
            .zip_map(&conv3d(&y, &w, &spec, ConvAlgo::Direct)?.scale(b), |p, q| p + q)?;
        let tag = format!("{:?} d{:?} g{}", spec.kernel, spec.dilation, spec.groups);
        s.rows.push(Check {
            module: "tensor-core",
            name: format!("conv linearity {tag}"),
            deviation: lhs.max_rel_dev(&rhs)?,
            tolerance: EQUIV_TOL,
        });

        let direct = conv3d(&x, &w, &spec, ConvAlgo::Direct)?;
        let mut w_fast = w.clone();
        if fault == Some(Fault::KernelWeight) {
            w_fast.data_mut()[0] += 1e-3;
        }
        let fast = conv3d(&x, &w_fast, &spec, ConvAlgo::Im2col)?;
        s.rows.push(Check {
            module: "tensor-core",
            name: format!("im2col matches direct {tag}"),
            deviation: fast.max_rel_dev(&direct)?,
            tolerance: 1e-12,
        });

        let (t, h, wd) = spec.receptive_field();
        let size = [2 * t + 1, 2 * h + 1, 2 * wd + 1];
        let imp = Tensor5::impulse([1, ci, size[0], size[1], size[2]], [0, 0, t, h, wd]);
        let w_pos = Tensor5::uniform(spec.weight_shape(ci, co)?, 0.1, 1.0, &mut s.rng);
        let resp = conv3d(&imp, &w_pos, &spec, ConvAlgo::Direct)?;
        let got = resp.support_extent();
        let mismatch = got.0.abs_diff(t) + got.1.abs_diff(h) + got.2.abs_diff(wd);
        s.push("tensor-core", format!("impulse support {tag}"), mismatch as f64, 0.0);
    }

    let x = uniform([2, 8, 3, 4, 4], &mut s.rng);
    let (a, b) = elementwise::split_channels(&x, 1, 4)?;
    let back = elementwise::concat_channels(&[&a, &b])?;
    let groups = elementwise::split_groups(&x, 4)?;
    let back_g = elementwise::concat_channels(&groups.iter().collect::<Vec<_>>())?;
    s.push("tensor-core", "split/concat round trip", bool_dev(back.bit_eq(&x) && back_g.bit_eq(&x)), 0.0);

    let big = Tensor5::uniform([1, 2, 3, 5, 5], -1e6, 1e6, &mut s.rng);
    let wbig = Tensor5::uniform([2, 2, 3, 3, 3], -1e3, 1e3, &mut s.rng);
    let outs = [
        conv3d(&big, &wbig, &ConvSpec::new((3, 3, 3)), ConvAlgo::Im2col)?,
        crate::ops::pool::maxpool3d(&big, (3, 3, 3))?.0,
        crate::ops::pool::mean_axes(&big, Axes::THW)?,
        elementwise::relu(&big),
    ];
    s.push("tensor-core", "finite outputs on finite inputs", bool_dev(outs.iter().all(Tensor5::is_finite)), 0.0);

    gradient_suite(s)
}

fn gradient_suite(s: &mut Suite) -> Result<()> {
    let x = uniform([2, 4, 3, 5, 5], &mut s.rng);
    let y = uniform([2, 4, 3, 5, 5], &mut s.rng);
    let ch = uniform([1, 4, 1, 1, 1], &mut s.rng);
    let mask = uniform([2, 4, 3, 5, 5], &mut s.rng);
    let w333 = uniform([4, 4, 3, 3, 3], &mut s.rng);
    let w_dil = uniform([4, 2, 1, 3, 3], &mut s.rng);
    let w_t = uniform([4, 4, 5, 1, 1], &mut s.rng);
    let gamma = Tensor5::uniform([1, 4, 1, 1, 1], 0.5, 1.5, &mut s.rng);
    let beta = uniform([1, 4, 1, 1, 1], &mut s.rng);
    let logits = uniform([6, 4, 1, 1, 1], &mut s.rng).scale(3.0);
    let labels = vec![0, 3, 1, 2, 2, 0];
    let fusion = uniform([4, 4, 2, 1, 1], &mut s.rng);
    let xf = uniform([2, 8, 3, 4, 4], &mut s.rng);
    let pooled_y = Tensor5::uniform([3, 8, 2, 3, 3], -0.5, 1.0, &mut s.rng);
    let run_mean: Vec<f64> = (0..4).map(|_| s.rng.random_range(-0.5..0.5)).collect();
    let run_var: Vec<f64> = (0..4).map(|_| s.rng.random_range(0.5..2.0)).collect();

    s.grad("add", &[x.clone(), y.clone()], |_, v| v[0].add(v[1]))?;
    s.grad("scale", std::slice::from_ref(&x), |_, v| Ok(v[0].scale(-2.5)))?;
    s.grad("sum", std::slice::from_ref(&x), |_, v| Ok(v[0].sum()))?;
    s.grad("weighted_sum", std::slice::from_ref(&x), |_, v| v[0].weighted_sum(&mask))?;
    s.grad("mul_const", std::slice::from_ref(&x), |_, v| v[0].mul_const(&mask))?;
    s.grad("relu", std::slice::from_ref(&x), |_, v| Ok(v[0].relu()))?;
    s.grad("channel_mul", &[x.clone(), ch.clone()], |_, v| v[0].channel_mul(v[1]))?;
    s.grad("channel_add", &[x.clone(), ch.clone()], |_, v| v[0].channel_add(v[1]))?;
    for algo in [ConvAlgo::Direct, ConvAlgo::Im2col] {
        let tag = format!("{algo:?}").to_lowercase();
        s.grad_with(algo, &format!("conv 3x3x3 {tag}"), &[x.clone(), w333.clone()], |_, v| {
            v[0].conv(v[1], ConvSpec::new((3, 3, 3)))
        })?;
    }
    s.grad("conv dilated grouped", &[x.clone(), w_dil.clone()], |_, v| {
        v[0].conv(v[1], ConvSpec::spatial(3, 2).with_groups(2))
    })?;
    s.grad("conv temporal", &[x.clone(), w_t.clone()], |_, v| v[0].conv(v[1], ConvSpec::temporal(5)))?;
    s.grad("maxpool", std::slice::from_ref(&x), |_, v| v[0].maxpool((3, 3, 3)))?;
    let odd = uniform([2, 3, 2, 4, 6], &mut s.rng);
    s.grad("avg_pool_spatial2", &[odd], |_, v| v[0].avg_pool_spatial2())?;
    s.grad("mean_axes", std::slice::from_ref(&x), |_, v| v[0].mean_axes(Axes::HW)?.mean_axes(Axes::T))?;
    s.grad("global_avg_pool", std::slice::from_ref(&x), |_, v| v[0].global_avg_pool())?;
    s.grad("narrow_channels", std::slice::from_ref(&x), |_, v| v[0].narrow_channels(1, 2))?;
    s.grad("split_groups concat", std::slice::from_ref(&x), |_, v| {
        let parts = v[0].split_groups(2)?;
        Var::concat_channels(&[parts[1].scale(2.0), parts[0]])
    })?;
    s.grad("split_channels", std::slice::from_ref(&x), |_, v| {
        let (a, b) = v[0].split_channels(1, 4)?;
        Var::concat_channels(&[b, a.scale(-1.0)])
    })?;
    s.grad("batchnorm_train", &[x.clone(), gamma.clone(), beta.clone()], |_, v| {
        Ok(v[0].batchnorm_train(v[1], v[2])?.out)
    })?;
    s.grad("batchnorm_eval", &[x.clone(), gamma.clone(), beta.clone()], |_, v| {
        v[0].batchnorm_eval(v[1], v[2], &run_mean, &run_var)
    })?;
    s.grad("cross_entropy", &[logits], |_, v| v[0].cross_entropy(&labels))?;
    s.grad("fusion_apply", &[xf, fusion.clone()], |_, v| v[0].fusion_apply(v[1]))?;
    s.grad("interaction_loss", &[fusion], |_, v| v[0].interaction_loss())?;
    s.grad("capacity_loss", &[pooled_y], |_, v| v[0].capacity_loss(4))?;
    Ok(())
}

/// Output channel `(i, k * sub + r)` is read from input group `(i + k) mod G`
/// at the same channel offset.
fn shuffle_gather(x: &Tensor5, g: usize) -> Result<Tensor5> {
    let s = x.shape();
    let c = s.c / g;
    let sub = c / g;
    Ok(Tensor5::from_fn(s, |[n, ch, t, h, w]| {
        let (i, off) = (ch / c, ch % c);
        let k = off / sub;
        x.get(n, ((i + k) % g) * c + off, t, h, w)
    }))
}

fn fusion_checks(s: &mut Suite) -> Result<()> {
    for g in 2..=4 {
        for mult in [1, 2, 4] {
            let c = g * mult;
            let x = uniform([2, g * c, 2, 3, 3], &mut s.rng);
            let tag = format!("G={g} c={c}");
            let grouping = FusionMatrix::grouping(g, c)?;
            s.push("fusion", format!("grouping is identity {tag}"), bool_dev(grouping.apply(&x)?.bit_eq(&x)), 0.0);
            s.push("fusion", format!("grouping ir_interactions {tag}"), grouping.ir_interactions(IR_EPS) as f64, 0.0);

            let shuffle = FusionMatrix::shuffle(g, c)?;
            let y = shuffle.apply(&x)?;
            s.push("fusion", format!("shuffle matches gather {tag}"), bool_dev(y.bit_eq(&shuffle_gather(&x, g)?)), 0.0);
            let mut per_pos_ok = true;
            let sh = x.shape();
            for n in 0..sh.n {
                for p in 0..sh.t * sh.h * sh.w {
                    let col = |t: &Tensor5| {
                        let mut v: Vec<u64> = (0..sh.c).map(|ch| t.plane(n, ch)[p].to_bits()).collect();
                        v.sort_unstable();
                        v
                    };
                    per_pos_ok &= col(&x) == col(&y);
                }
            }
            s.push("fusion", format!("shuffle permutes values {tag}"), bool_dev(per_pos_ok), 0.0);
            let ir = shuffle.ir_interactions(IR_EPS) as f64;
            s.push("fusion", format!("shuffle ir_interactions (G-1)c {tag}"), (ir - ((g - 1) * c) as f64).abs(), 0.0);

            let dropout = FusionMatrix::dropout(g, c)?;
            let sub = c / g;
            let expect = Tensor5::from_fn(x.shape(), |[n, ch, t, h, w]| {
                let k = (ch % c) / sub;
                x.get(n, k * c + ch % c, t, h, w)
            });
            s.push("fusion", format!("dropout matches gather {tag}"), bool_dev(dropout.apply(&x)?.bit_eq(&expect)), 0.0);

            let t1 = FusionMatrix::from_tensor(&uniform([g, g, c, 1, 1], &mut s.rng), true)?;
            let t2 = FusionMatrix::from_tensor(&uniform([g, g, c, 1, 1], &mut s.rng), true)?;
            let x2 = uniform([2, g * c, 2, 3, 3], &mut s.rng);
            let sum_x = x.zip_map(&x2, |a, b| 2.0 * a - b)?;
            let lin_x = t1.apply(&sum_x)?.max_rel_dev(&t1.apply(&x)?.zip_map(&t1.apply(&x2)?, |a, b| 2.0 * a - b)?)?;
            let t_sum = FusionMatrix::from_tensor(&t1.to_tensor().zip_map(&t2.to_tensor(), |a, b| a + 3.0 * b)?, true)?;
            let lin_t = t_sum
                .apply(&x)?
                .max_rel_dev(&t1.apply(&x)?.zip_map(&t2.apply(&x)?, |a, b| a + 3.0 * b)?)?;
            s.push("fusion", format!("apply linear {tag}"), lin_x.max(lin_t), EQUIV_TOL);
            let round = FusionMatrix::from_w(&t1.to_w(), true)?;
            s.push("fusion", format!("from_w inverts to_w {tag}"), bool_dev(round == t1), 0.0);
            let soft = t1.softmax_k()?;
            let worst = soft
                .l1_importance()
                .iter()
                .flatten()
                .map(|v| (v - (c / g) as f64).abs())
                .fold(0.0, f64::max);
            s.push("fusion", format!("softmax_k norm c/G {tag}"), worst, 1e-12);
        }
    }
    Ok(())
}

fn run_block(block: &SynthesizerBlock, store: &ParamStore, u: &Tensor5, train: bool) -> Result<(Tensor5, Tensor5, Tensor5)> {
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, store, train);
    let o = block.forward(&ctx, tape.constant(u.clone()))?;
    Ok((
        o.out.value().as_ref().clone(),
        o.spatial.value().as_ref().clone(),
        o.fused.value().as_ref().clone(),
    ))
}

fn linear_probe(s: usize, t: usize) -> SynthesizerConfig {
    SynthesizerConfig {
        use_maxpool_branch: false,
        batch_norm: false,
        spatial_relu: false,
        inter_relu: false,
        residual: false,
        init: InitPolicy::Random { scale: 1.0 },
        ..SynthesizerConfig::new(s, t)
    }
    .with_minimum_groups()
}

fn synth_checks(s: &mut Suite) -> Result<()> {
    let configs = [
        ("default 5x5x5", SynthesizerConfig::default()),
        ("5x5x7", SynthesizerConfig::new(5, 7)),
        ("1+1+1", SynthesizerConfig {
            decomposition: crate::synth::Decomposition::OnePlusOnePlusOne,
            ..SynthesizerConfig::default()
        }),
        ("shuffle fusion", SynthesizerConfig {
            fusion: FusionMode::Shuffle,
            ..SynthesizerConfig::default()
        }),
    ];
    for (name, cfg) in configs {
        let g = cfg.groups;
        let width = g * g;
        let mut store = ParamStore::new();
        let block = SynthesizerBlock::build(&cfg, width, &mut store, "blk", &mut s.rng)?;
        let mut ok = true;
        let mut shape_ok = true;
        for _ in 0..5 {
            let u = uniform([2, width, 6, 7, 7], &mut s.rng);
            for train in [false, true] {
                let (out, _, _) = run_block(&block, &store, &u, train)?;
                ok &= out.bit_eq(&u);
                shape_ok &= out.shape() == u.shape();
            }
        }
        s.push("synthesizer", format!("zero-init identity {name}"), bool_dev(ok), 0.0);
        s.push("synthesizer", format!("shape preserved {name}"), bool_dev(shape_ok), 0.0);
    }

    for (sp, tp) in [(1, 3), (3, 3), (3, 5), (5, 5), (5, 7), (7, 3)] {
        for dilation in [true, false] {
            let cfg = SynthesizerConfig {
                use_dilation: dilation,
                ..linear_probe(sp, tp)
            };
            let g = cfg.groups;
            let mut store = ParamStore::new();
            let block = SynthesizerBlock::build(&cfg, g, &mut store, "rf", &mut s.rng)?;
            let (ct, ch) = (tp + 4, sp + 4);
            let (ct, ch) = (ct | 1, ch | 1);
            let mut worst = 0;
            for j in 0..g {
                let u = Tensor5::impulse([1, g, ct, ch, ch], [0, j, ct / 2, ch / 2, ch / 2]);
                let (out, _, _) = run_block(&block, &store, &u, false)?;
                let (et, eh, ew) = out.support_extent();
                worst = worst.max(et.saturating_sub(tp) + eh.saturating_sub(sp) + ew.saturating_sub(sp));
            }
            s.push(
                "synthesizer",
                format!("impulse support within {sp}x{sp}x{tp} dilation={dilation}"),
                worst as f64,
                0.0,
            );
        }
    }

    let cfg = SynthesizerConfig {
        fusion: FusionMode::Shuffle,
        init: InitPolicy::Random { scale: 0.5 },
        ..SynthesizerConfig::default()
    };
    let g = cfg.groups;
    let mut store = ParamStore::new();
    let block = SynthesizerBlock::build(&cfg, g * g * 2, &mut store, "sh", &mut s.rng)?;
    let u = uniform([2, g * g * 2, 4, 6, 6], &mut s.rng);
    let (_, x, y) = run_block(&block, &store, &u, true)?;
    let expect = shuffle_gather(&x, g)?;
    let equal = y.data().iter().zip(expect.data()).all(|(a, b)| a == b);
    s.push("synthesizer", "shuffle fusion permutes spatial features", bool_dev(equal), 0.0);

    let cfg = SynthesizerConfig::default();
    let mut store = ParamStore::new();
    let block = SynthesizerBlock::build(&cfg, 2 * cfg.groups, &mut store, "gf", &mut s.rng)?;
    let u = uniform([2, 2 * cfg.groups, 5, 6, 6], &mut s.rng);
    let r = uniform([2, 2 * cfg.groups, 5, 6, 6], &mut s.rng);
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store, true);
    let out = block.forward(&ctx, tape.constant(u))?.out.weighted_sum(&r)?;
    let grads = tape.backward(out)?;
    let dt = grads.of(ctx.param(block.fusion_id())).max_abs();
    let dwp = grads.of(ctx.param(block.w_prime_id())).max_abs();
    s.push("synthesizer", "zero-init gradient reaches W", bool_dev(dt > 0.0), 0.0);
    s.push("synthesizer", "zero-init gradient on W' vanishes", dwp, 0.0);
    Ok(())
}

fn loss_checks(s: &mut Suite) -> Result<()> {
    let g = 4;
    let mut bound_dev: f64 = 0.0;
    let mut mono: f64 = 0.0;
    for _ in 0..10 {
        let t = FusionMatrix::from_tensor(&uniform([g, g, 3, 1, 1], &mut s.rng), true)?;
        let v = losses::interaction_loss(&t);
        if !(v > -1.0 && v <= -0.5) {
            bound_dev = bound_dev.max(1.0);
        }
        let grown = FusionMatrix::from_tensor(&t.to_tensor().scale(1.5), true)?;
        mono = mono.max(losses::interaction_loss(&grown) - v);
    }
    s.push("losses", "interaction loss in (-1, -0.5]", bound_dev, 0.0);
    s.push("losses", "interaction loss decreases as |T| grows", mono.max(0.0), 0.0);
    let zero = FusionMatrix::zeros(g, 3, true)?;
    s.push("losses", "interaction loss at T=0 is -0.5", (losses::interaction_loss(&zero) + 0.5).abs(), 1e-15);

    let y = Tensor5::uniform([3, g * 2, 2, 3, 3], -0.5, 1.0, &mut s.rng);
    let r = losses::capacity_loss(&y, g)?;
    let gf = g as f64;
    let split = 1.0 / gf + (gf - 1.0) / gf * r.mean_off_diagonal_cosine;
    s.push("losses", "capacity loss = 1/G + off-diagonal share", (r.value - split).abs(), 1e-9);

    let mut t = uniform([g, g, 3, 1, 1], &mut s.rng).scale(0.1);
    let min_l1 = |t: &Tensor5| -> Result<f64> {
        Ok(FusionMatrix::from_tensor(t, true)?.l1_importance().iter().flatten().copied().fold(f64::INFINITY, f64::min))
    };
    let start = min_l1(&t)?;
    let mut increasing = true;
    let mut prev = start;
    for _ in 0..50 {
        let (_, grad) = losses::interaction_loss_with_grad(&t)?;
        t.axpy(-10.0, &grad)?;
        let now = min_l1(&t)?;
        increasing &= now > prev;
        prev = now;
    }
    s.push("losses", "descent on interaction loss grows every |T_ij|", bool_dev(increasing), 0.0);
    Ok(())
}

fn approx_checks(s: &mut Suite) -> Result<()> {
    let seed = s.rng.random();
    for row in approx::verification_report(seed)? {
        s.push("approx-lab", format!("{}: {}", row.form, row.check), row.deviation, row.tolerance);
    }
    Ok(())
}

/// Runs every registered check.
pub fn run_all(opts: VerifyOptions) -> Result<Vec<Check>> {
    let mut s = Suite {
        rows: Vec::new(),
        rng: ChaCha8Rng::seed_from_u64(opts.seed),
    };
    tensor_core(&mut s, opts.fault)?;
    fusion_checks(&mut s)?;
    synth_checks(&mut s)?;
    loss_checks(&mut s)?;
    approx_checks(&mut s)?;
    Ok(s.rows)
}

pub fn all_passed(rows: &[Check]) -> bool {
    rows.iter().all(Check::passed)
}

pub fn write_report_text(rows: &[Check], mut out: impl Write) -> Result<()> {
    for r in rows {
        writeln!(
            out,
            "{} [{}] {}: deviation {:.3e} (tolerance {:.1e})",
            if r.passed() { "PASS" } else { "FAIL" },
            r.module,
            r.name,
            r.deviation,
            r.tolerance
        )?;
    }
    let failed = rows.iter().filter(|r| !r.passed()).count();
    writeln!(out, "{} checks, {} failed", rows.len(), failed)?;
    Ok(())
}

pub fn write_report_csv(rows: &[Check], mut out: impl Write) -> Result<()> {
    writeln!(out, "module,check,deviation,tolerance,pass")?;
    for r in rows {
        writeln!(out, "{},{},{:e},{:e},{}", r.module, r.name.replace(',', ";"), r.deviation, r.tolerance, r.passed())?;
    }
    Ok(())
}
