//! Flat `key = value` run configuration with namespaced keys and a
//! resolved snapshot writer.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::{default_classes, generate_dataset, Dataset};
use crate::error::{config_err, Result};
use crate::model::NetworkConfig;
use crate::synth::{BaselineKind, Decomposition, FusionMode, SynthesizerConfig};
use crate::train::TrainConfig;

/// File name of the resolved snapshot written into each output directory.
pub const SNAPSHOT: &str = "resolved.cfg";

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub noise: f64,
    /// Overrides the run seed for clip generation.
    pub seed: Option<u64>,
    /// Previously generated dataset to load instead of generating one.
    pub dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_per_class: 100,
            val_per_class: 50,
            frames: 8,
            height: 32,
            width: 32,
            noise: 0.05,
            seed: None,
            dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub model: NetworkConfig,
    /// Baseline topology replacing the synth.* settings.
    pub baseline: Option<BaselineKind>,
    pub grid: Vec<(usize, usize)>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs"),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            model: NetworkConfig::default(),
            baseline: None,
            grid: vec![(1, 3), (3, 3), (3, 5), (5, 5)],
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| config_err!("{key}: cannot parse {v:?}: {e}"))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        _ => Err(config_err!("{key}: expected a boolean, got {v:?}")),
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

fn parse_rfs(key: &str, v: &str) -> Result<Vec<(usize, usize)>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|pair| {
            let (s, t) = pair
                .split_once('x')
                .ok_or_else(|| config_err!("{key}: expected SxT, got {pair:?}"))?;
            Ok((parse_num(key, s)?, parse_num(key, t)?))
        })
        .collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn decomposition_name(d: Decomposition) -> &'static str {
    match d {
        Decomposition::TwoPlusOne => "2+1",
        Decomposition::OnePlusOnePlusOne => "1+1+1",
    }
}

fn fusion_name(f: FusionMode) -> &'static str {
    match f {
        FusionMode::Learned => "learned",
        FusionMode::Grouping => "grouping",
        FusionMode::Dropout => "dropout",
        FusionMode::Shuffle => "shuffle",
    }
}

fn baseline_name(b: BaselineKind) -> &'static str {
    match b {
        BaselineKind::RfS => "RF-S",
        BaselineKind::RfL => "RF-L",
        BaselineKind::RfLInception => "RF-L-Inception",
        BaselineKind::RfLInceptionT => "RF-L-Inception-T",
    }
}

impl RunConfig {
    /// Parses `text` on top of the defaults. Unknown keys, repeated keys and
    /// malformed values are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut groups: Option<usize> = None;
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| config_err!("line {}: expected key = value", n + 1))?;
            let (key, v) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(config_err!("line {}: key {key} given twice", n + 1));
            }
            let s = &mut cfg.model.synth;
            match key {
                "seed" => cfg.seed = parse_num(key, v)?,
                "out" => cfg.out = PathBuf::from(v),
                "data.train_per_class" => cfg.data.train_per_class = parse_num(key, v)?,
                "data.val_per_class" => cfg.data.val_per_class = parse_num(key, v)?,
                "data.frames" => cfg.data.frames = parse_num(key, v)?,
                "data.height" => cfg.data.height = parse_num(key, v)?,
                "data.width" => cfg.data.width = parse_num(key, v)?,
                "data.noise" => cfg.data.noise = parse_num(key, v)?,
                "data.seed" => cfg.data.seed = Some(parse_num(key, v)?),
                "data.dir" => cfg.data.dir = (!v.is_empty()).then(|| PathBuf::from(v)),
                "train.lr" => cfg.train.lr = parse_num(key, v)?,
                "train.momentum" => cfg.train.momentum = parse_num(key, v)?,
                "train.lr_decay" => cfg.train.lr_decay = parse_num(key, v)?,
                "train.decay_epochs" => cfg.train.decay_epochs = parse_list(key, v)?,
                "train.epochs" => cfg.train.epochs = parse_num(key, v)?,
                "train.batch_size" => cfg.train.batch_size = parse_num(key, v)?,
                "train.alpha" => cfg.train.loss.alpha = parse_num(key, v)?,
                "train.beta" => cfg.train.loss.beta = parse_num(key, v)?,
                "model.base_channels" => cfg.model.base_channels = parse_num(key, v)?,
                "model.stages" => cfg.model.stages = parse_num(key, v)?,
                "model.insert_after" => cfg.model.insert_after = parse_list(key, v)?,
                "model.dropout" => cfg.model.dropout = parse_num(key, v)?,
                "model.baseline" => {
                    cfg.baseline = if v == "none" { None } else { Some(v.parse()?) };
                }
                "synth.G" => {
                    groups = if v == "auto" { None } else { Some(parse_num(key, v)?) };
                }
                "synth.max_spatial_rfs" => s.max_spatial_rfs = parse_num(key, v)?,
                "synth.max_temporal_rfs" => s.max_temporal_rfs = parse_num(key, v)?,
                "synth.feature_proportion" => {
                    let (a, b) = v
                        .split_once('/')
                        .ok_or_else(|| config_err!("{key}: expected NUM/DEN, got {v:?}"))?;
                    s.feature_proportion = (parse_num(key, a.trim())?, parse_num(key, b.trim())?);
                }
                "synth.multi_scale" => s.multi_scale = parse_bool(key, v)?,
                "synth.maxpool" => s.use_maxpool_branch = parse_bool(key, v)?,
                "synth.dilation" => s.use_dilation = parse_bool(key, v)?,
                "synth.batch_norm" => s.batch_norm = parse_bool(key, v)?,
                "synth.spatial_relu" => s.spatial_relu = parse_bool(key, v)?,
                "synth.inter_relu" => s.inter_relu = parse_bool(key, v)?,
                "synth.residual" => s.residual = parse_bool(key, v)?,
                "synth.decomposition" => {
                    s.decomposition = match v {
                        "2+1" => Decomposition::TwoPlusOne,
                        "1+1+1" => Decomposition::OnePlusOnePlusOne,
                        _ => return Err(config_err!("{key}: expected 2+1 or 1+1+1, got {v:?}")),
                    }
                }
                "synth.fusion" => {
                    s.fusion = match v {
                        "learned" => FusionMode::Learned,
                        "grouping" => FusionMode::Grouping,
                        "dropout" => FusionMode::Dropout,
                        "shuffle" => FusionMode::Shuffle,
                        _ => return Err(config_err!("{key}: unknown fusion {v:?}")),
                    }
                }
                "grid.candidates" => cfg.grid = parse_rfs(key, v)?,
                _ => return Err(config_err!("line {}: unknown key {key:?}", n + 1)),
            }
        }
        if let Some(kind) = cfg.baseline {
            cfg.model.synth = kind.config();
        } else {
            let s = &mut cfg.model.synth;
            s.groups = groups.unwrap_or_else(|| s.minimum_groups());
        }
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Replaces the run seed everywhere it is used.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.train_per_class == 0 || d.frames == 0 || d.height == 0 || d.width == 0 {
            return Err(config_err!("data sizes must be positive"));
        }
        if !(d.noise.is_finite() && d.noise >= 0.0) {
            return Err(config_err!("data.noise must be finite and nonnegative"));
        }
        let t = &self.train;
        if !(t.lr.is_finite() && t.lr >= 0.0 && t.momentum.is_finite() && t.lr_decay.is_finite()) {
            return Err(config_err!("train.lr, train.momentum and train.lr_decay must be finite"));
        }
        if t.batch_size == 0 {
            return Err(config_err!("train.batch_size must be positive"));
        }
        if self.grid.is_empty() {
            return Err(config_err!("grid.candidates needs at least one SxT pair"));
        }
        self.model.validate()
    }

    /// Generates or loads the dataset described by `data.*`.
    pub fn dataset(&self) -> Result<Dataset> {
        if let Some(dir) = &self.data.dir {
            return Dataset::load(dir);
        }
        let d = &self.data;
        let classes = default_classes(d.frames, d.height, d.width, d.noise);
        generate_dataset(&classes, d.train_per_class, d.val_per_class, d.seed.unwrap_or(self.seed))
    }

    /// Every key with its resolved value, in a fixed order. Parsing the
    /// snapshot reproduces this configuration.
    pub fn snapshot(&self) -> String {
        let mut o = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(o, "{k} = {v}");
        };
        let (d, t, m) = (&self.data, &self.train, &self.model);
        let s: &SynthesizerConfig = &m.synth;
        kv("seed", self.seed.to_string());
        kv("out", self.out.display().to_string());
        kv("data.train_per_class", d.train_per_class.to_string());
        kv("data.val_per_class", d.val_per_class.to_string());
        kv("data.frames", d.frames.to_string());
        kv("data.height", d.height.to_string());
        kv("data.width", d.width.to_string());
        kv("data.noise", format!("{:?}", d.noise));
        kv("data.seed", d.seed.unwrap_or(self.seed).to_string());
        kv("data.dir", d.dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default());
        kv("train.lr", format!("{:?}", t.lr));
        kv("train.momentum", format!("{:?}", t.momentum));
        kv("train.lr_decay", format!("{:?}", t.lr_decay));
        kv("train.decay_epochs", join(&t.decay_epochs));
        kv("train.epochs", t.epochs.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.alpha", format!("{:?}", t.loss.alpha));
        kv("train.beta", format!("{:?}", t.loss.beta));
        kv("model.base_channels", m.base_channels.to_string());
        kv("model.stages", m.stages.to_string());
        kv("model.insert_after", join(&m.insert_after));
        kv("model.dropout", format!("{:?}", m.dropout));
        kv("model.baseline", self.baseline.map_or("none", baseline_name).to_string());
        if self.baseline.is_none() {
            kv("synth.G", s.groups.to_string());
            kv("synth.max_spatial_rfs", s.max_spatial_rfs.to_string());
            kv("synth.max_temporal_rfs", s.max_temporal_rfs.to_string());
            kv("synth.feature_proportion", format!("{}/{}", s.feature_proportion.0, s.feature_proportion.1));
            kv("synth.multi_scale", s.multi_scale.to_string());
            kv("synth.maxpool", s.use_maxpool_branch.to_string());
            kv("synth.dilation", s.use_dilation.to_string());
            kv("synth.batch_norm", s.batch_norm.to_string());
            kv("synth.spatial_relu", s.spatial_relu.to_string());
            kv("synth.inter_relu", s.inter_relu.to_string());
            kv("synth.residual", s.residual.to_string());
            kv("synth.decomposition", decomposition_name(s.decomposition).to_string());
            kv("synth.fusion", fusion_name(s.fusion).to_string());
        }
        let grid: Vec<String> = self.grid.iter().map(|(s, t)| format!("{s}x{t}")).collect();
        kv("grid.candidates", grid.join(","));
        o
    }

    /// Writes the snapshot into `dir`.
    pub fn write_snapshot(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let path = dir.as_ref().join(SNAPSHOT);
        std::fs::create_dir_all(dir.as_ref())?;
        std::fs::write(&path, self.snapshot())?;
        Ok(path)
    }
}
