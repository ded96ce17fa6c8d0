//! The synthesizer block: grouped multi-scale spatial kernels, a fusion
//! matrix routing their outputs, grouped multi-scale temporal kernels scaled
//! by `W'`, and a residual connection.

use rand::Rng;

use crate::autograd::Var;
use crate::error::{config_err, Result};
use crate::fusion::FusionMatrix;
use crate::ops::conv::ConvSpec;
use crate::ops::elementwise::proportion_channels;
use crate::params::{BatchNorm, Ctx, ParamId, ParamStore};
use crate::tensor::{Shape5, Tensor5};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decomposition {
    /// `k x k` spatial kernel followed by a `k x 1 x 1` temporal kernel.
    TwoPlusOne,
    /// The spatial kernel is further split into `k x 1` and `1 x k`.
    OnePlusOnePlusOne,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMode {
    Learned,
    Grouping,
    Dropout,
    Shuffle,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitPolicy {
    /// Fusion matrix zero (learned) and `W'` chosen so the block starts as the identity.
    Identity,
    /// Fusion entries and `W'` drawn uniformly from `[-scale, scale]`.
    Random { scale: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthesizerConfig {
    pub groups: usize,
    pub max_spatial_rfs: usize,
    pub max_temporal_rfs: usize,
    /// `(num, den)`: the leading `num / den` share of channels is enhanced.
    pub feature_proportion: (usize, usize),
    /// When false every conv branch uses the maximum kernel size.
    pub multi_scale: bool,
    pub use_maxpool_branch: bool,
    pub use_dilation: bool,
    pub batch_norm: bool,
    /// ReLU after the spatial batch norm.
    pub spatial_relu: bool,
    /// ReLU between the fusion layer and the temporal kernels.
    pub inter_relu: bool,
    pub residual: bool,
    pub decomposition: Decomposition,
    pub fusion: FusionMode,
    pub init: InitPolicy,
}

impl Default for SynthesizerConfig {
    fn default() -> Self {
        Self::new(5, 5)
    }
}

/// Operation carried by one branch of the block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Conv { spatial: usize, temporal: usize },
    /// Spatial `(1, ws, ws)` and temporal `(wt, 1, 1)` max-pools, each followed by a pointwise conv.
    Pool { spatial_window: usize, temporal_window: usize },
}

fn scale_count(max_rfs: usize) -> usize {
    max_rfs.div_ceil(2)
}

impl SynthesizerConfig {
    /// Multi-scale block with learned fusion, a max-pool branch and the
    /// smallest group count that holds both kernel bags.
    pub fn new(max_spatial_rfs: usize, max_temporal_rfs: usize) -> Self {
        let mut cfg = Self {
            groups: 1,
            max_spatial_rfs,
            max_temporal_rfs,
            feature_proportion: (1, 1),
            multi_scale: true,
            use_maxpool_branch: true,
            use_dilation: true,
            batch_norm: true,
            spatial_relu: true,
            inter_relu: false,
            residual: true,
            decomposition: Decomposition::TwoPlusOne,
            fusion: FusionMode::Learned,
            init: InitPolicy::Identity,
        };
        cfg.groups = cfg.minimum_groups();
        cfg
    }

    /// Groups needed so that every kernel size in both bags gets a branch.
    pub fn minimum_groups(&self) -> usize {
        let conv = if self.multi_scale {
            scale_count(self.max_spatial_rfs).max(scale_count(self.max_temporal_rfs))
        } else {
            1
        };
        conv + self.use_maxpool_branch as usize
    }

    /// Re-derives `groups` after changing the bag or pool switches.
    pub fn with_minimum_groups(mut self) -> Self {
        self.groups = self.minimum_groups();
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("spatial", self.max_spatial_rfs), ("temporal", self.max_temporal_rfs)] {
            if v == 0 || v % 2 == 0 {
                return Err(config_err!("maximum {name} receptive field must be odd, got {v}"));
            }
        }
        if self.groups < self.minimum_groups() {
            return Err(config_err!(
                "{} groups cannot hold kernel bags up to {}x{}x{} ({} needed)",
                self.groups,
                self.max_spatial_rfs,
                self.max_spatial_rfs,
                self.max_temporal_rfs,
                self.minimum_groups()
            ));
        }
        let (num, den) = self.feature_proportion;
        if den == 0 || num == 0 || num > den {
            return Err(config_err!("feature proportion {num}/{den} must lie in (0, 1]"));
        }
        if let InitPolicy::Random { scale } = self.init {
            if !(scale.is_finite() && scale >= 0.0) {
                return Err(config_err!("random init scale must be finite and nonnegative"));
            }
        }
        Ok(())
    }

    /// Branch layout in summation order: ascending kernel size, pool last.
    pub fn branches(&self) -> Vec<Branch> {
        let conv = self.groups - self.use_maxpool_branch as usize;
        let mut out: Vec<Branch> = (0..conv)
            .map(|j| {
                let size = |max: usize| if self.multi_scale { (2 * j + 1).min(max) } else { max };
                Branch::Conv {
                    spatial: size(self.max_spatial_rfs),
                    temporal: size(self.max_temporal_rfs),
                }
            })
            .collect();
        if self.use_maxpool_branch {
            out.push(Branch::Pool {
                spatial_window: self.max_spatial_rfs.min(3),
                temporal_window: self.max_temporal_rfs.min(3),
            });
        }
        out
    }

    /// Spatial conv specs for a kernel of receptive field `k`.
    fn spatial_specs(&self, k: usize) -> Vec<ConvSpec> {
        let (size, dilation) = if self.use_dilation && k >= 5 {
            (3, (k - 1) / 2)
        } else {
            (k, 1)
        };
        match self.decomposition {
            Decomposition::OnePlusOnePlusOne if k > 1 => vec![
                ConvSpec::new((1, size, 1)).with_dilation((1, dilation, 1)),
                ConvSpec::new((1, 1, size)).with_dilation((1, 1, dilation)),
            ],
            _ => vec![ConvSpec::spatial(size, dilation)],
        }
    }
}

/// The four baseline topologies the synthesizer is compared against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaselineKind {
    /// Single-scale 3x3x3.
    RfS,
    /// Single-scale 5x5x5.
    RfL,
    /// Multi-scale cube kernels with grouping fusion.
    RfLInception,
    /// Multi-scale temporal-only kernels with grouping fusion.
    RfLInceptionT,
}

impl std::str::FromStr for BaselineKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "RF-S" => Ok(Self::RfS),
            "RF-L" => Ok(Self::RfL),
            "RF-L-Inception" => Ok(Self::RfLInception),
            "RF-L-Inception-T" => Ok(Self::RfLInceptionT),
            other => Err(config_err!("unknown baseline variant {other:?}")),
        }
    }
}

impl BaselineKind {
    pub fn config(self) -> SynthesizerConfig {
        let base = |s, t| SynthesizerConfig {
            fusion: FusionMode::Grouping,
            ..SynthesizerConfig::new(s, t)
        };
        match self {
            Self::RfS => SynthesizerConfig {
                multi_scale: false,
                use_maxpool_branch: false,
                feature_proportion: (1, 6),
                ..base(3, 3)
            }
            .with_minimum_groups(),
            Self::RfL => SynthesizerConfig {
                multi_scale: false,
                use_maxpool_branch: false,
                feature_proportion: (1, 8),
                ..base(5, 5)
            }
            .with_minimum_groups(),
            Self::RfLInception => SynthesizerConfig {
                feature_proportion: (1, 4),
                ..base(5, 5)
            },
            Self::RfLInceptionT => SynthesizerConfig {
                feature_proportion: (1, 4),
                ..base(1, 5)
            },
        }
    }
}

#[derive(Clone, Debug)]
struct BranchParams {
    spatial: Vec<(ParamId, ConvSpec)>,
    spatial_pool: Option<(usize, usize, usize)>,
    temporal: (ParamId, ConvSpec),
    temporal_pool: Option<(usize, usize, usize)>,
}

/// Parameter handles of one synthesizer; values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct SynthesizerBlock {
    cfg: SynthesizerConfig,
    prefix: String,
    total_channels: usize,
    channels: usize,
    branches: Vec<BranchParams>,
    bn: Option<BatchNorm>,
    fusion: ParamId,
    w_prime: ParamId,
}

/// Activations exposed by a forward pass, for the regularizers and probes.
pub struct BlockOutput<'t> {
    pub out: Var<'t>,
    /// Concatenated spatial branch outputs `X` (after BN/ReLU).
    pub spatial: Var<'t>,
    /// Fusion output `Y`.
    pub fused: Var<'t>,
    /// The fusion matrix as a `(G, G, c, 1, 1)` variable.
    pub fusion: Var<'t>,
}

/// Uniform in `[-b, b]` with `b = sqrt(6 / fan_in)`.
pub fn he_uniform(shape: Shape5, rng: &mut impl Rng) -> Tensor5 {
    let fan_in = shape.c * shape.t * shape.h * shape.w;
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor5::uniform(shape, -bound, bound, rng)
}

impl SynthesizerBlock {
    /// Registers the block's parameters under `prefix`. `channels` is the
    /// full input width; the block itself acts on the configured proportion.
    pub fn build(
        cfg: &SynthesizerConfig,
        channels: usize,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let (num, den) = cfg.feature_proportion;
        let width = proportion_channels(channels, num, den)?;
        let g = cfg.groups;
        if width % g != 0 {
            return Err(config_err!("{width} enhanced channels cannot be split into {g} groups"));
        }
        let c = width / g;
        let fusion_value = match cfg.fusion {
            FusionMode::Learned => FusionMatrix::zeros(g, c, true)?,
            FusionMode::Grouping => FusionMatrix::grouping(g, c)?,
            FusionMode::Dropout => FusionMatrix::dropout(g, c)?,
            FusionMode::Shuffle => FusionMatrix::shuffle(g, c)?,
        };
        let trainable_fusion = cfg.fusion == FusionMode::Learned;

        let mut branches = Vec::with_capacity(g);
        for (j, branch) in cfg.branches().into_iter().enumerate() {
            let p = format!("{prefix}.b{j}");
            let conv_shape = |spec: &ConvSpec| spec.weight_shape(c, c);
            let bp = match branch {
                Branch::Conv { spatial, temporal } => {
                    let mut sp = Vec::new();
                    for (k, spec) in cfg.spatial_specs(spatial).into_iter().enumerate() {
                        let w = he_uniform(conv_shape(&spec)?, rng);
                        sp.push((store.add(format!("{p}.spatial{k}"), w, true)?, spec));
                    }
                    let spec = ConvSpec::temporal(temporal);
                    let w = he_uniform(conv_shape(&spec)?, rng);
                    BranchParams {
                        spatial: sp,
                        spatial_pool: None,
                        temporal: (store.add(format!("{p}.temporal"), w, true)?, spec),
                        temporal_pool: None,
                    }
                }
                Branch::Pool {
                    spatial_window,
                    temporal_window,
                } => {
                    let spec = ConvSpec::pointwise();
                    let ws = he_uniform(conv_shape(&spec)?, rng);
                    let wt = he_uniform(conv_shape(&spec)?, rng);
                    BranchParams {
                        spatial: vec![(store.add(format!("{p}.spatial0"), ws, true)?, spec)],
                        spatial_pool: Some((1, spatial_window, spatial_window)),
                        temporal: (store.add(format!("{p}.temporal"), wt, true)?, spec),
                        temporal_pool: Some((temporal_window, 1, 1)),
                    }
                }
            };
            branches.push(bp);
        }

        let bn = if cfg.batch_norm {
            Some(BatchNorm::register(store, &format!("{prefix}.bn"), width)?)
        } else {
            None
        };

        let mut fusion_tensor = fusion_value.to_tensor();
        let w_prime_value = match cfg.init {
            InitPolicy::Identity => {
                // A frozen non-zero fusion needs W' = 0 to start as the identity.
                Tensor5::full(Shape5::channels(width), if trainable_fusion { 1.0 } else { 0.0 })
            }
            InitPolicy::Random { scale } => {
                if trainable_fusion {
                    fusion_tensor = Tensor5::uniform(fusion_tensor.shape(), -scale, scale, rng);
                }
                Tensor5::uniform(Shape5::channels(width), -scale, scale, rng)
            }
        };
        let fusion = store.add(format!("{prefix}.fusion"), fusion_tensor, trainable_fusion)?;
        let w_prime = store.add(format!("{prefix}.wprime"), w_prime_value, true)?;

        Ok(Self {
            cfg: cfg.clone(),
            prefix: prefix.to_string(),
            total_channels: channels,
            channels: width,
            branches,
            bn,
            fusion,
            w_prime,
        })
    }

    pub fn config(&self) -> &SynthesizerConfig {
        &self.cfg
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn groups(&self) -> usize {
        self.cfg.groups
    }

    /// Channels the block itself transforms.
    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Input width expected by [`Self::split_enhance`].
    pub fn total_channels(&self) -> usize {
        self.total_channels
    }

    pub fn fusion_id(&self) -> ParamId {
        self.fusion
    }

    pub fn w_prime_id(&self) -> ParamId {
        self.w_prime
    }

    pub fn fusion_matrix(&self, store: &ParamStore) -> Result<FusionMatrix> {
        FusionMatrix::from_tensor(store.get(self.fusion), store.is_trainable(self.fusion))
    }

    /// The fusion matrix and `W'` restored to their initial identity values.
    pub fn zero_init(&self, store: &mut ParamStore) {
        store.get_mut(self.fusion).data_mut().fill(0.0);
        store.get_mut(self.w_prime).data_mut().fill(1.0);
    }

    /// Applies the block to an input of exactly [`Self::channels`] channels.
    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, u: Var<'t>) -> Result<BlockOutput<'t>> {
        let s = u.shape();
        if s.c != self.channels {
            return Err(crate::error::dim_err!(
                "synthesizer {} expects {} channels, got {}",
                self.prefix,
                self.channels,
                s.c
            ));
        }
        let groups = u.split_groups(self.cfg.groups)?;
        let mut spatial = Vec::with_capacity(groups.len());
        for (x, b) in groups.into_iter().zip(&self.branches) {
            let mut h = x;
            if let Some(w) = b.spatial_pool {
                h = h.maxpool(w)?;
            }
            for &(id, spec) in &b.spatial {
                h = h.conv(ctx.param(id), spec)?;
            }
            spatial.push(h);
        }
        let mut x = Var::concat_channels(&spatial)?;
        if let Some(bn) = &self.bn {
            x = bn.forward(ctx, x)?;
        }
        if self.cfg.spatial_relu {
            x = x.relu();
        }
        let fusion = ctx.param(self.fusion);
        let fused = x.fusion_apply(fusion)?;
        let mut y = fused;
        if self.cfg.inter_relu {
            y = y.relu();
        }
        let mut temporal = Vec::with_capacity(self.branches.len());
        for (h, b) in y.split_groups(self.cfg.groups)?.into_iter().zip(&self.branches) {
            let mut h = h;
            if let Some(w) = b.temporal_pool {
                h = h.maxpool(w)?;
            }
            let (id, spec) = b.temporal;
            temporal.push(h.conv(ctx.param(id), spec)?);
        }
        let v = Var::concat_channels(&temporal)?.channel_mul(ctx.param(self.w_prime))?;
        let out = if self.cfg.residual { v.add(u)? } else { v };
        Ok(BlockOutput {
            out,
            spatial: x,
            fused,
            fusion,
        })
    }

    /// Enhances the leading feature proportion of `u` and passes the rest through.
    pub fn split_enhance<'t>(&self, ctx: &Ctx<'t, '_>, u: Var<'t>) -> Result<BlockOutput<'t>> {
        let (num, den) = self.cfg.feature_proportion;
        if num == den {
            return self.forward(ctx, u);
        }
        if u.shape().c != self.total_channels {
            return Err(crate::error::dim_err!(
                "synthesizer {} expects {} input channels, got {}",
                self.prefix,
                self.total_channels,
                u.shape().c
            ));
        }
        let (head, rest) = u.split_channels(num, den)?;
        let mut o = self.forward(ctx, head)?;
        o.out = Var::concat_channels(&[o.out, rest])?;
        Ok(o)
    }
}

/// Builds one of the baseline blocks for an input of `channels` channels.
pub fn build_baseline_variant(
    kind: BaselineKind,
    channels: usize,
    store: &mut ParamStore,
    prefix: &str,
    rng: &mut impl Rng,
) -> Result<SynthesizerBlock> {
    SynthesizerBlock::build(&kind.config(), channels, store, prefix, rng)
}
