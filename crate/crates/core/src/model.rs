//! A small residual 2-D backbone applied frame by frame, with synthesizers
//! inserted after selected stages and a frame-averaging classifier head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Var;
use crate::error::{config_err, Result};
use crate::ops::conv::ConvSpec;
use crate::ops::pool::Axes;
use crate::params::{BatchNorm, Ctx, ParamId, ParamStore};
use crate::synth::{he_uniform, BlockOutput, SynthesizerBlock, SynthesizerConfig};
use crate::tensor::{Shape5, Tensor5};

/// Offset that separates the synthesizer RNG stream from the backbone's, so
/// the backbone weights do not depend on which synthesizers are inserted.
const SYNTH_STREAM: u64 = 0x5157_4e54_4845_5349;

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub classes: usize,
    /// Stem and first-stage width; each later stage doubles it.
    pub base_channels: usize,
    pub stages: usize,
    /// 1-based stage indices followed by a synthesizer.
    pub insert_after: Vec<usize>,
    pub synth: SynthesizerConfig,
    pub dropout: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            classes: 4,
            base_channels: 8,
            stages: 4,
            insert_after: vec![1, 2, 3, 4],
            synth: SynthesizerConfig {
                feature_proportion: (1, 2),
                ..SynthesizerConfig::default()
            },
            dropout: 0.3,
        }
    }
}

impl NetworkConfig {
    pub fn stage_channels(&self, stage: usize) -> usize {
        self.base_channels << (stage - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 || self.base_channels == 0 || self.classes < 2 || self.in_channels == 0 {
            return Err(config_err!("network needs at least one stage, two classes and nonzero widths"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(config_err!("dropout rate must lie in [0, 1), got {}", self.dropout));
        }
        let mut seen = vec![false; self.stages + 1];
        for &s in &self.insert_after {
            if s == 0 || s > self.stages {
                return Err(config_err!("insertion stage {s} outside 1..={}", self.stages));
            }
            if std::mem::replace(&mut seen[s], true) {
                return Err(config_err!("insertion stage {s} listed twice"));
            }
        }
        if !self.insert_after.is_empty() {
            self.synth.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Stage {
    downsample: bool,
    conv: ParamId,
    bn: BatchNorm,
    shortcut: Option<ParamId>,
}

#[derive(Clone, Debug)]
pub struct ToyNetwork {
    cfg: NetworkConfig,
    stem: ParamId,
    stem_bn: BatchNorm,
    stages: Vec<Stage>,
    /// `(stage, block)` in stage order.
    synths: Vec<(usize, SynthesizerBlock)>,
    classifier: ParamId,
    bias: ParamId,
}

/// Result of one forward pass.
pub struct NetOutput<'t> {
    /// `(N, K, 1, 1, 1)` class scores.
    pub logits: Var<'t>,
    pub blocks: Vec<BlockOutput<'t>>,
}

/// Builds the network and its parameters deterministically from `seed`.
pub fn build_network(cfg: &NetworkConfig, seed: u64) -> Result<(ToyNetwork, ParamStore)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut synth_rng = ChaCha8Rng::seed_from_u64(seed ^ SYNTH_STREAM);
    let mut store = ParamStore::new();
    let pointwise = ConvSpec::pointwise();
    let k3 = ConvSpec::spatial(3, 1);
    let base = cfg.base_channels;

    let stem = store.add("stem.conv", he_uniform(k3.weight_shape(cfg.in_channels, base)?, &mut rng), true)?;
    let stem_bn = BatchNorm::register(&mut store, "stem.bn", base)?;

    let mut stages = Vec::with_capacity(cfg.stages);
    let mut in_ch = base;
    for s in 1..=cfg.stages {
        let ch = cfg.stage_channels(s);
        let p = format!("stage{s}");
        let conv = store.add(format!("{p}.conv"), he_uniform(k3.weight_shape(in_ch, ch)?, &mut rng), true)?;
        let bn = BatchNorm::register(&mut store, &format!("{p}.bn"), ch)?;
        let shortcut = if ch != in_ch {
            Some(store.add(
                format!("{p}.shortcut"),
                he_uniform(pointwise.weight_shape(in_ch, ch)?, &mut rng),
                true,
            )?)
        } else {
            None
        };
        stages.push(Stage {
            downsample: s > 1,
            conv,
            bn,
            shortcut,
        });
        in_ch = ch;
    }

    let classifier = store.add(
        "head.classifier",
        he_uniform(pointwise.weight_shape(in_ch, cfg.classes)?, &mut rng),
        true,
    )?;
    let bias = store.add("head.bias", Tensor5::zeros(Shape5::channels(cfg.classes)), true)?;

    let mut order = cfg.insert_after.clone();
    order.sort_unstable();
    let mut synths = Vec::with_capacity(order.len());
    for s in order {
        let block = SynthesizerBlock::build(&cfg.synth, cfg.stage_channels(s), &mut store, &format!("synth{s}"), &mut synth_rng)?;
        synths.push((s, block));
    }

    Ok((
        ToyNetwork {
            cfg: cfg.clone(),
            stem,
            stem_bn,
            stages,
            synths,
            classifier,
            bias,
        },
        store,
    ))
}

impl ToyNetwork {
    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn synthesizers(&self) -> impl Iterator<Item = &SynthesizerBlock> {
        self.synths.iter().map(|(_, b)| b)
    }

    pub fn synthesizer_stages(&self) -> Vec<usize> {
        self.synths.iter().map(|&(s, _)| s).collect()
    }

    /// Forward pass over a `(N, C, T, H, W)` batch. `dropout_rng` enables
    /// inverted dropout before the classifier.
    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>, dropout_rng: Option<&mut ChaCha8Rng>) -> Result<NetOutput<'t>> {
        let s = x.shape();
        if s.c != self.cfg.in_channels {
            return Err(crate::error::dim_err!("network expects {} input channels, got {}", self.cfg.in_channels, s.c));
        }
        let k3 = ConvSpec::spatial(3, 1);
        let mut h = x.conv(ctx.param(self.stem), k3)?;
        h = self.stem_bn.forward(ctx, h)?.relu().avg_pool_spatial2()?;
        let mut blocks = Vec::with_capacity(self.synths.len());
        let mut next_synth = self.synths.iter().peekable();
        for (i, stage) in self.stages.iter().enumerate() {
            if stage.downsample {
                h = h.avg_pool_spatial2()?;
            }
            let main = self.stages[i].bn.forward(ctx, h.conv(ctx.param(stage.conv), k3)?)?;
            let skip = match stage.shortcut {
                Some(w) => h.conv(ctx.param(w), ConvSpec::pointwise())?,
                None => h,
            };
            h = main.add(skip)?.relu();
            if let Some((_, block)) = next_synth.next_if(|(st, _)| *st == i + 1) {
                let o = block.split_enhance(ctx, h)?;
                h = o.out;
                blocks.push(o);
            }
        }
        let mut f = h.mean_axes(Axes::HW)?;
        if let Some(rng) = dropout_rng {
            let p = self.cfg.dropout;
            if p > 0.0 {
                let keep = 1.0 / (1.0 - p);
                let shape = f.shape();
                let mask = Tensor5::from_fn(shape, |_| if rng.random::<f64>() < p { 0.0 } else { keep });
                f = f.mul_const(&mask)?;
            }
        }
        let per_frame = f.conv(ctx.param(self.classifier), ConvSpec::pointwise())?.channel_add(ctx.param(self.bias))?;
        let logits = per_frame.mean_axes(Axes::T)?;
        Ok(NetOutput { logits, blocks })
    }

    /// Eval-mode logits of a batch, without gradient bookkeeping.
    pub fn predict(&self, store: &ParamStore, x: &Tensor5) -> Result<Tensor5> {
        let tape = crate::autograd::Tape::new();
        let ctx = Ctx::new(&tape, store, false);
        let logits = self.forward(&ctx, tape.constant(x.clone()), None)?.logits;
        Ok(logits.value().as_ref().clone())
    }
}
