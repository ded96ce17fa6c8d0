//! SGD training, evaluation and the maximum-RFS grid search.

use std::fmt::Write as _;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::data::{Dataset, Split};
use crate::error::{usage_err, Error, Result};
use crate::losses::{self, LossWeights};
use crate::model::{build_network, NetworkConfig, ToyNetwork};
use crate::params::{Ctx, ParamId, ParamStore};
use crate::tensor::Tensor5;

pub const LOG_HEADER: &str = "epoch,cls,interaction,capacity,total,val_top1";

/// Keeps the shuffle and dropout streams apart from each other and from the
/// weight-initialization streams derived from the same seed.
const SHUFFLE_STREAM: u64 = 0x7368_7566;
const DROPOUT_STREAM: u64 = 0x6472_6f70;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub lr_decay: f64,
    /// 0-based epochs at whose start the rate is multiplied by `lr_decay`.
    pub decay_epochs: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: LossWeights,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            lr_decay: 0.1,
            decay_epochs: vec![20, 25],
            epochs: 30,
            batch_size: 16,
            loss: LossWeights::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let k = self.decay_epochs.iter().filter(|&&e| epoch >= e).count();
        self.lr * self.lr_decay.powi(k as i32)
    }
}

/// Loss components averaged over the steps of one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub cls: f64,
    pub interaction: f64,
    pub capacity: f64,
    pub total: f64,
    pub val_top1: f64,
}

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.8},{:.8},{:.8},{:.8},{:.6}",
            self.epoch, self.cls, self.interaction, self.capacity, self.total, self.val_top1
        )
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(LOG_HEADER);
        s.push('\n');
        for r in &self.epochs {
            let _ = writeln!(s, "{}", r.csv_row());
        }
        s
    }

    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        out.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }
}

/// Terms of the training objective for one batch.
pub struct LossTerms<'t> {
    pub cls: Var<'t>,
    pub interaction: Option<Var<'t>>,
    pub capacity: Option<Var<'t>>,
    pub total: Var<'t>,
}

fn mean<'t>(terms: Vec<Var<'t>>) -> Result<Option<Var<'t>>> {
    let n = terms.len();
    let mut it = terms.into_iter();
    let Some(mut acc) = it.next() else {
        return Ok(None);
    };
    for t in it {
        acc = acc.add(t)?;
    }
    Ok(Some(acc.scale(1.0 / n as f64)))
}

/// Classification loss plus the block regularizers, each averaged over the
/// inserted blocks.
pub fn batch_objective<'t>(
    net: &ToyNetwork,
    ctx: &Ctx<'t, '_>,
    x: &Tensor5,
    labels: &[usize],
    weights: LossWeights,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<LossTerms<'t>> {
    let out = net.forward(ctx, ctx.tape().constant(x.clone()), dropout_rng)?;
    let cls = out.logits.cross_entropy(labels)?;
    let mut inter = Vec::with_capacity(out.blocks.len());
    let mut cap = Vec::with_capacity(out.blocks.len());
    for (b, block) in out.blocks.iter().zip(net.synthesizers()) {
        inter.push(b.fusion.interaction_loss()?);
        cap.push(b.fused.capacity_loss(block.groups())?);
    }
    let interaction = mean(inter)?;
    let capacity = mean(cap)?;
    let mut total = cls;
    if let Some(i) = interaction {
        total = total.add(i.scale(weights.alpha))?;
    }
    if let Some(c) = capacity {
        total = total.add(c.scale(weights.beta))?;
    }
    Ok(LossTerms {
        cls,
        interaction,
        capacity,
        total,
    })
}

/// Heavy-ball momentum buffers: `v <- mu v + g`, `p <- p - lr v`.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    momentum: f64,
    velocity: Vec<Option<Tensor5>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor5)], lr: f64) -> Result<()> {
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        let mut order: Vec<&(ParamId, Tensor5)> = grads.iter().collect();
        order.sort_by_key(|(id, _)| *id);
        for (id, g) in order {
            let slot = &mut self.velocity[id.index()];
            let v = match slot {
                Some(v) => {
                    for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
                        *vi = self.momentum * *vi + gi;
                    }
                    v
                }
                None => slot.insert(g.clone()),
            };
            store.get_mut(*id).axpy(-lr, v)?;
        }
        Ok(())
    }
}

/// One optimizer step on a batch; returns the batch loss terms as numbers.
#[allow(clippy::too_many_arguments)]
fn train_step(
    net: &ToyNetwork,
    store: &mut ParamStore,
    sgd: &mut Sgd,
    x: &Tensor5,
    labels: &[usize],
    cfg: &TrainConfig,
    lr: f64,
    dropout_rng: &mut ChaCha8Rng,
) -> Result<[f64; 4]> {
    let tape = Tape::new();
    let (terms, grads, buffers) = {
        let ctx = Ctx::new(&tape, store, true);
        let t = batch_objective(net, &ctx, x, labels, cfg.loss, Some(dropout_rng))?;
        let vals = [
            t.cls.item()?,
            t.interaction.map_or(Ok(0.0), |v| v.item())?,
            t.capacity.map_or(Ok(0.0), |v| v.item())?,
            t.total.item()?,
        ];
        if !vals[3].is_finite() {
            return Ok([f64::NAN; 4]);
        }
        let g = tape.backward(t.total)?;
        (vals, ctx.gradients(&g), ctx.take_buffer_updates())
    };
    sgd.step(store, &grads, lr)?;
    for (id, v) in buffers {
        *store.get_mut(id) = v;
    }
    Ok(terms)
}

/// Trains `store` in place and returns the per-epoch log. When `progress` is
/// given, each CSV row is written there as soon as its epoch finishes.
pub fn train(
    net: &ToyNetwork,
    store: &mut ParamStore,
    data: &Dataset,
    cfg: &TrainConfig,
    mut progress: Option<&mut dyn Write>,
) -> Result<TrainLog> {
    if data.train.is_empty() {
        return Err(usage_err!("training split is empty"));
    }
    if cfg.batch_size == 0 {
        return Err(usage_err!("batch size must be positive"));
    }
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_STREAM);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ DROPOUT_STREAM);
    let mut sgd = Sgd::new(cfg.momentum);
    let mut log = TrainLog::default();
    if let Some(out) = progress.as_deref_mut() {
        writeln!(out, "{LOG_HEADER}")?;
    }
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let lr = cfg.lr_at(epoch);
        let mut sums = [0.0; 4];
        let mut steps = 0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (x, labels) = data.train.batch(chunk)?;
            let terms = train_step(net, store, &mut sgd, &x, &labels, cfg, lr, &mut dropout_rng)?;
            if !terms[3].is_finite() {
                return Err(Error::Divergence {
                    epoch: epoch + 1,
                    step: step + 1,
                    detail: format!("non-finite total loss at lr {lr}"),
                });
            }
            for (s, t) in sums.iter_mut().zip(terms) {
                *s += t;
            }
            steps += 1;
        }
        let [cls, interaction, capacity, total] = sums.map(|s| s / steps as f64);
        let val_top1 = if data.val.is_empty() {
            0.0
        } else {
            evaluate(net, store, &data.val, data.classes)?.top1
        };
        let rec = EpochRecord {
            epoch: epoch + 1,
            cls,
            interaction,
            capacity,
            total,
            val_top1,
        };
        if let Some(out) = progress.as_deref_mut() {
            writeln!(out, "{}", rec.csv_row())?;
            out.flush()?;
        }
        log.epochs.push(rec);
    }
    Ok(log)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub top1: f64,
    /// Accuracy per class; `NaN` for classes absent from the split.
    pub per_class: Vec<f64>,
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
    /// `(N, K)` logits, row-major.
    pub logits: Vec<f64>,
}

impl EvalReport {
    /// Two-way accuracy on the clips labelled `a` or `b`, deciding only
    /// between those two classes.
    pub fn pair_accuracy(&self, a: usize, b: usize) -> f64 {
        let k = self.per_class.len();
        let (mut hit, mut n) = (0usize, 0usize);
        for (i, &l) in self.labels.iter().enumerate() {
            if l != a && l != b {
                continue;
            }
            let row = &self.logits[i * k..(i + 1) * k];
            let pick = if row[a] >= row[b] { a } else { b };
            hit += (pick == l) as usize;
            n += 1;
        }
        if n == 0 {
            f64::NAN
        } else {
            hit as f64 / n as f64
        }
    }
}

const EVAL_BATCH: usize = 32;

pub fn evaluate(net: &ToyNetwork, store: &ParamStore, split: &Split, classes: usize) -> Result<EvalReport> {
    let mut predictions = Vec::with_capacity(split.len());
    let mut logits = Vec::with_capacity(split.len() * classes);
    let labels = split.labels();
    let idx: Vec<usize> = (0..split.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, _) = split.batch(chunk)?;
        let out = net.predict(store, &x)?;
        let k = out.shape().c;
        if k != classes {
            return Err(usage_err!("network has {k} outputs but the split has {classes} classes"));
        }
        for row in out.data().chunks(k) {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            predictions.push(best);
            logits.extend_from_slice(row);
        }
    }
    let mut hit = vec![0usize; classes];
    let mut count = vec![0usize; classes];
    for (&p, &l) in predictions.iter().zip(&labels) {
        count[l] += 1;
        hit[l] += (p == l) as usize;
    }
    let correct: usize = hit.iter().sum();
    let top1 = if labels.is_empty() { 0.0 } else { correct as f64 / labels.len() as f64 };
    let per_class = hit
        .iter()
        .zip(&count)
        .map(|(&h, &c)| if c == 0 { f64::NAN } else { h as f64 / c as f64 })
        .collect();
    Ok(EvalReport {
        top1,
        per_class,
        predictions,
        labels,
        logits,
    })
}

/// Fusion statistics of one inserted block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockDiagnostics {
    pub stage: usize,
    pub ir_interactions: usize,
    /// Mean off-diagonal cosine between pooled groups of the fused features,
    /// averaged over the split.
    pub mean_off_diagonal_cosine: f64,
}

/// Eval-mode fusion statistics of every synthesizer over `split`.
pub fn block_diagnostics(net: &ToyNetwork, store: &ParamStore, split: &Split, eps: f64) -> Result<Vec<BlockDiagnostics>> {
    let blocks: Vec<_> = net.synthesizers().collect();
    let mut cos_sum = vec![0.0; blocks.len()];
    let mut seen = 0usize;
    let idx: Vec<usize> = (0..split.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, _) = split.batch(chunk)?;
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, store, false);
        let out = net.forward(&ctx, tape.constant(x), None)?;
        for ((acc, b), block) in cos_sum.iter_mut().zip(&out.blocks).zip(&blocks) {
            let r = losses::capacity_loss(&b.fused.value(), block.groups())?;
            *acc += r.mean_off_diagonal_cosine * chunk.len() as f64;
        }
        seen += chunk.len();
    }
    blocks
        .iter()
        .zip(net.synthesizer_stages())
        .zip(cos_sum)
        .map(|((block, stage), c)| {
            Ok(BlockDiagnostics {
                stage,
                ir_interactions: block.fusion_matrix(store)?.ir_interactions(eps),
                mean_off_diagonal_cosine: if seen == 0 { 0.0 } else { c / seen as f64 },
            })
        })
        .collect()
}

/// Trained network, its parameters and the run's log.
pub struct RunResult {
    pub net: ToyNetwork,
    pub store: ParamStore,
    pub log: TrainLog,
    pub eval: EvalReport,
}

/// Builds a network from `seed = train.seed`, trains it and evaluates it on
/// the validation split.
pub fn run_experiment(net_cfg: &NetworkConfig, train_cfg: &TrainConfig, data: &Dataset) -> Result<RunResult> {
    let (net, mut store) = build_network(net_cfg, train_cfg.seed)?;
    let log = train(&net, &mut store, data, train_cfg, None)?;
    let eval = evaluate(&net, &store, &data.val, data.classes)?;
    Ok(RunResult { net, store, log, eval })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridRow {
    pub spatial: usize,
    pub temporal: usize,
    pub top1: f64,
}

/// Trains one model per `(spatial, temporal)` maximum RFS with shared seeds
/// and returns rows ranked by accuracy, ties kept in candidate order. Each
/// candidate keeps the base group count unless its bags need more.
pub fn grid_search_rfs(
    candidates: &[(usize, usize)],
    net_cfg: &NetworkConfig,
    train_cfg: &TrainConfig,
    data: &Dataset,
) -> Result<Vec<GridRow>> {
    if candidates.is_empty() {
        return Err(usage_err!("grid search needs at least one candidate"));
    }
    let mut rows = Vec::with_capacity(candidates.len());
    for &(s, t) in candidates {
        let mut cfg = net_cfg.clone();
        cfg.synth.max_spatial_rfs = s;
        cfg.synth.max_temporal_rfs = t;
        cfg.synth.groups = cfg.synth.groups.max(cfg.synth.minimum_groups());
        let r = run_experiment(&cfg, train_cfg, data)?;
        rows.push(GridRow {
            spatial: s,
            temporal: t,
            top1: r.eval.top1,
        });
    }
    rows.sort_by(|a, b| b.top1.total_cmp(&a.top1));
    Ok(rows)
}

pub fn grid_csv(rows: &[GridRow]) -> String {
    let mut s = String::from("rank,spatial,temporal,top1\n");
    for (i, r) in rows.iter().enumerate() {
        let _ = writeln!(s, "{},{},{},{:.6}", i + 1, r.spatial, r.temporal, r.top1);
    }
    s
}
