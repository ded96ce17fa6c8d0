//! Procedural clips of a moving shape, with classes that differ in object
//! scale, speed, direction and playback order.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{config_err, Error, Result};
use crate::tensor::{Shape5, Tensor5};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Square,
    Disc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Playback {
    Forward,
    Reversed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticClipSpec {
    pub label: usize,
    pub shape: ShapeKind,
    /// Side length (square) or diameter (disc) in pixels.
    pub scale: usize,
    /// Unit-free direction `(dy, dx)`; normalized on use.
    pub direction: (f64, f64),
    /// Pixels per frame.
    pub speed: f64,
    pub playback: Playback,
    pub noise: f64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl SyntheticClipSpec {
    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn reversed(&self) -> Self {
        let playback = match self.playback {
            Playback::Forward => Playback::Reversed,
            Playback::Reversed => Playback::Forward,
        };
        Self { playback, ..self.clone() }
    }

    fn unit_direction(&self) -> (f64, f64) {
        let (dy, dx) = self.direction;
        let norm = (dy * dy + dx * dx).sqrt();
        if norm == 0.0 {
            (0.0, 0.0)
        } else {
            (dy / norm, dx / norm)
        }
    }
}

/// The default four-class benchmark: left-to-right, its time reversal, a
/// small fast diagonal and a large slow diagonal.
pub fn default_classes(frames: usize, height: usize, width: usize, noise: f64) -> Vec<SyntheticClipSpec> {
    let base = SyntheticClipSpec {
        label: 0,
        shape: ShapeKind::Square,
        scale: 7,
        direction: (0.0, 1.0),
        speed: 2.0,
        playback: Playback::Forward,
        noise,
        frames,
        height,
        width,
        seed: 0,
    };
    vec![
        base.clone(),
        SyntheticClipSpec {
            label: 1,
            ..base.reversed()
        },
        SyntheticClipSpec {
            label: 2,
            shape: ShapeKind::Disc,
            scale: 3,
            direction: (1.0, 1.0),
            speed: 3.0,
            ..base.clone()
        },
        SyntheticClipSpec {
            label: 3,
            shape: ShapeKind::Disc,
            scale: 11,
            direction: (1.0, 1.0),
            speed: 1.0,
            ..base
        },
    ]
}

fn inside(kind: ShapeKind, scale: usize, cy: f64, cx: f64, y: usize, x: usize) -> bool {
    let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
    let r = scale as f64 / 2.0;
    match kind {
        ShapeKind::Square => (py - cy).abs() < r && (px - cx).abs() < r,
        ShapeKind::Disc => (py - cy).powi(2) + (px - cx).powi(2) < r * r,
    }
}

/// Allowed range for the starting centre along one axis.
fn start_range(extent: usize, scale: usize, travel: f64) -> Option<(f64, f64)> {
    let r = scale as f64 / 2.0;
    let (lo, hi) = (r + travel.min(0.0).abs(), extent as f64 - r - travel.max(0.0));
    (lo <= hi).then_some((lo, hi))
}

/// Renders one clip of shape `(1, 1, T, H, W)`. Noise is drawn for the
/// forward sequence before any reversal, so the two playbacks of one seed are
/// exact frame reversals of each other.
pub fn generate_clip(spec: &SyntheticClipSpec) -> Result<Tensor5> {
    let (t, h, w) = (spec.frames, spec.height, spec.width);
    if t == 0 || h == 0 || w == 0 {
        return Err(config_err!("clip dimensions must be positive"));
    }
    if !(spec.noise.is_finite() && spec.noise >= 0.0) || !spec.speed.is_finite() || spec.speed < 0.0 {
        return Err(config_err!("noise and speed must be finite and nonnegative"));
    }
    let (uy, ux) = spec.unit_direction();
    let steps = (t - 1) as f64 * spec.speed;
    let (ty, tx) = (uy * steps, ux * steps);
    let fit_y = start_range(h, spec.scale, ty);
    let fit_x = start_range(w, spec.scale, tx);
    let (Some((y0, y1)), Some((x0, x1))) = (fit_y, fit_x) else {
        return Err(config_err!(
            "a {}px shape moving {:.1}x{:.1}px does not fit in {h}x{w} frames",
            spec.scale,
            ty.abs(),
            tx.abs()
        ));
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sy = if y1 > y0 { rng.random_range(y0..y1) } else { y0 };
    let sx = if x1 > x0 { rng.random_range(x0..x1) } else { x0 };
    let shape = Shape5::new(1, 1, t, h, w);
    let mut clip = Tensor5::zeros(shape);
    let noise = (spec.noise > 0.0).then(|| Normal::new(0.0, spec.noise).expect("valid sigma"));
    let frame = h * w;
    for f in 0..t {
        let d = f as f64 * spec.speed;
        let (cy, cx) = (sy + uy * d, sx + ux * d);
        let plane = &mut clip.data_mut()[f * frame..(f + 1) * frame];
        for y in 0..h {
            for x in 0..w {
                let mut v = if inside(spec.shape, spec.scale, cy, cx, y, x) { 1.0 } else { 0.0 };
                if let Some(n) = &noise {
                    v += n.sample(&mut rng);
                }
                plane[y * w + x] = v;
            }
        }
    }
    if spec.playback == Playback::Reversed {
        let data = clip.data_mut();
        for f in 0..t / 2 {
            let (a, b) = (f * frame, (t - 1 - f) * frame);
            let (head, tail) = data.split_at_mut(b);
            head[a..a + frame].swap_with_slice(&mut tail[..frame]);
        }
    }
    Ok(clip)
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub label: usize,
    pub seed: u64,
    pub clip: Tensor5,
}

#[derive(Clone, Debug, Default)]
pub struct Split {
    pub samples: Vec<Sample>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Stacks the clips at `indices` into one `(B, C, T, H, W)` batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor5, Vec<usize>)> {
        let first = self.samples[indices[0]].clip.shape();
        let mut data = Vec::with_capacity(first.numel() * indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = &self.samples[i];
            s.clip.expect_same_shape(&self.samples[indices[0]].clip)?;
            data.extend_from_slice(s.clip.data());
            labels.push(s.label);
        }
        let shape = Shape5::new(indices.len(), first.c, first.t, first.h, first.w);
        Ok((Tensor5::from_vec(shape, data)?, labels))
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut index = String::from("label,seed,path\n");
        for (i, s) in self.samples.iter().enumerate() {
            let file = format!("{i:05}.t5");
            s.clip.save(dir.join(&file))?;
            index.push_str(&format!("{},{},{}\n", s.label, s.seed, file));
        }
        fs::File::create(dir.join("index.csv"))?.write_all(index.as_bytes())?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("index.csv");
        let origin = path.display().to_string();
        let bad = |detail: String| Error::Format {
            path: origin.clone(),
            detail,
        };
        let mut lines = BufReader::new(fs::File::open(&path)?).lines();
        match lines.next() {
            Some(Ok(h)) if h == "label,seed,path" => {}
            _ => return Err(bad("missing header 'label,seed,path'".into())),
        }
        let mut samples = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.splitn(3, ',').collect();
            if f.len() != 3 {
                return Err(bad(format!("line {}: expected label,seed,path", i + 2)));
            }
            let label = f[0].parse().map_err(|e| bad(format!("line {}: {e}", i + 2)))?;
            let seed = f[1].parse().map_err(|e| bad(format!("line {}: {e}", i + 2)))?;
            let clip = Tensor5::load(dir.join(f[2]))?;
            samples.push(Sample { label, seed, clip });
        }
        Ok(Self { samples })
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Split,
    pub val: Split,
    pub classes: usize,
}

impl Dataset {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        self.train.save(dir.join("train"))?;
        self.val.save(dir.join("val"))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let train = Split::load(dir.join("train"))?;
        let val = Split::load(dir.join("val"))?;
        let classes = train.samples.iter().chain(&val.samples).map(|s| s.label + 1).max().unwrap_or(0);
        Ok(Self { train, val, classes })
    }
}

/// Index of an earlier template that `classes[i]` plays backwards, if any.
fn reversal_twin(classes: &[SyntheticClipSpec], i: usize) -> Option<usize> {
    let mut r = classes[i].reversed();
    (0..i).find(|&j| {
        r.label = classes[j].label;
        r.seed = classes[j].seed;
        r == classes[j]
    })
}

/// Class-balanced train and validation splits. Clip seeds are drawn from one
/// stream seeded by `seed` and never repeat across rounds, so the splits
/// share no seed. A template that is the time reversal of an earlier one
/// reuses that template's seed within each round, so every clip of the
/// reversed class is the exact reversal of a clip of the forward class.
pub fn generate_dataset(
    classes: &[SyntheticClipSpec],
    train_per_class: usize,
    val_per_class: usize,
    seed: u64,
) -> Result<Dataset> {
    if classes.len() < 2 {
        return Err(config_err!("a dataset needs at least two classes"));
    }
    for (i, c) in classes.iter().enumerate() {
        if c.label != i {
            return Err(config_err!("class template {i} carries label {}", c.label));
        }
    }
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    let mut used = HashSet::new();
    let mut split = |per_class: usize| -> Result<Split> {
        let mut samples = Vec::with_capacity(per_class * classes.len());
        for _ in 0..per_class {
            let mut round = Vec::with_capacity(classes.len());
            for (i, template) in classes.iter().enumerate() {
                let s = match reversal_twin(classes, i) {
                    Some(j) => round[j],
                    None => loop {
                        let s: u64 = seeds.random();
                        if used.insert(s) {
                            break s;
                        }
                    },
                };
                round.push(s);
                let clip = generate_clip(&template.with_seed(s))?;
                samples.push(Sample {
                    label: template.label,
                    seed: s,
                    clip,
                });
            }
        }
        Ok(Split { samples })
    };
    let train = split(train_per_class)?;
    let val = split(val_per_class)?;
    Ok(Dataset {
        train,
        val,
        classes: classes.len(),
    })
}
