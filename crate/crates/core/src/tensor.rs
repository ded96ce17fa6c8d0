//! Dense 5-D tensors laid out as (N, C, T, H, W), row-major, `f64`.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{dim_err, Error, Result};

/// Shape of a [`Tensor5`]: batch, channels, time, height, width.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Shape5 {
    pub n: usize,
    pub c: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape5 {
    pub const fn new(n: usize, c: usize, t: usize, h: usize, w: usize) -> Self {
        Self { n, c, t, h, w }
    }

    pub const fn scalar() -> Self {
        Self::new(1, 1, 1, 1, 1)
    }

    /// Shape of a per-channel vector broadcastable against `(N, C, T, H, W)`.
    pub const fn channels(c: usize) -> Self {
        Self::new(1, c, 1, 1, 1)
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.t * self.h * self.w
    }

    /// Number of elements in one (t, h, w) volume.
    pub const fn volume(&self) -> usize {
        self.t * self.h * self.w
    }

    pub const fn dims(&self) -> [usize; 5] {
        [self.n, self.c, self.t, self.h, self.w]
    }

    pub const fn with_c(self, c: usize) -> Self {
        Self { c, ..self }
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, t: usize, h: usize, w: usize) -> usize {
        debug_assert!(n < self.n && c < self.c && t < self.t && h < self.h && w < self.w);
        (((n * self.c + c) * self.t + t) * self.h + h) * self.w + w
    }

    /// Inverse of [`Shape5::offset`].
    pub fn unravel(&self, mut offset: usize) -> [usize; 5] {
        let w = offset % self.w;
        offset /= self.w;
        let h = offset % self.h;
        offset /= self.h;
        let t = offset % self.t;
        offset /= self.t;
        let c = offset % self.c;
        [offset / self.c, c, t, h, w]
    }
}

impl fmt::Debug for Shape5 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {}, {})", self.n, self.c, self.t, self.h, self.w)
    }
}

impl From<[usize; 5]> for Shape5 {
    fn from(d: [usize; 5]) -> Self {
        Self::new(d[0], d[1], d[2], d[3], d[4])
    }
}

/// A dense 5-D array of doubles.
#[derive(Clone, PartialEq)]
pub struct Tensor5 {
    shape: Shape5,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor5 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor5{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor5 {
    pub fn zeros(shape: impl Into<Shape5>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Shape5>, value: f64) -> Self {
        let shape = shape.into();
        Self {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(Shape5::scalar(), value)
    }

    pub fn from_vec(shape: impl Into<Shape5>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if data.len() != shape.numel() {
            return Err(dim_err!(
                "data length {} does not match shape {:?} ({} elements)",
                data.len(),
                shape,
                shape.numel()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: impl Into<Shape5>, mut f: impl FnMut([usize; 5]) -> f64) -> Self {
        let shape = shape.into();
        let data = (0..shape.numel()).map(|i| f(shape.unravel(i))).collect();
        Self { shape, data }
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform(shape: impl Into<Shape5>, lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let shape = shape.into();
        let data = (0..shape.numel()).map(|_| rng.random_range(lo..hi)).collect();
        Self { shape, data }
    }

    /// A tensor that is zero everywhere except a single 1.0 at `at`.
    pub fn impulse(shape: impl Into<Shape5>, at: [usize; 5]) -> Self {
        let shape = shape.into();
        let mut t = Self::zeros(shape);
        let off = shape.offset(at[0], at[1], at[2], at[3], at[4]);
        t.data[off] = 1.0;
        t
    }

    #[inline]
    pub fn shape(&self) -> Shape5 {
        self.shape
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, t: usize, h: usize, w: usize) -> f64 {
        self.data[self.shape.offset(n, c, t, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, t: usize, h: usize, w: usize, v: f64) {
        let off = self.shape.offset(n, c, t, h, w);
        self.data[off] = v;
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(dim_err!("item() on tensor of shape {:?}", self.shape));
        }
        Ok(self.data[0])
    }

    pub fn reshape(self, shape: impl Into<Shape5>) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor5, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_same_shape(other)?;
        Ok(Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn expect_same_shape(&self, other: &Tensor5) -> Result<()> {
        if self.shape != other.shape {
            return Err(dim_err!(
                "shape mismatch: {:?} vs {:?}",
                self.shape,
                other.shape
            ));
        }
        Ok(())
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Tensor5) -> Result<()> {
        self.expect_same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor5) -> Result<f64> {
        self.expect_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor5) -> Result<f64> {
        self.expect_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// Largest elementwise deviation from `reference`, relative to the
    /// reference's largest magnitude. Two all-zero tensors have deviation 0.
    pub fn max_rel_dev(&self, reference: &Tensor5) -> Result<f64> {
        let diff = self.max_abs_diff(reference)?;
        if diff == 0.0 {
            return Ok(0.0);
        }
        let scale = reference.max_abs().max(self.max_abs());
        Ok(diff / scale)
    }

    /// True when both tensors have identical shape and bit patterns.
    pub fn bit_eq(&self, other: &Tensor5) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Contiguous slice holding the (t, h, w) volume of one (sample, channel).
    #[inline]
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let v = self.shape.volume();
        let start = (n * self.shape.c + c) * v;
        &self.data[start..start + v]
    }

    #[inline]
    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let v = self.shape.volume();
        let start = (n * self.shape.c + c) * v;
        &mut self.data[start..start + v]
    }

    /// Contiguous slice with all channels of one sample.
    #[inline]
    pub fn sample(&self, n: usize) -> &[f64] {
        let len = self.shape.c * self.shape.volume();
        &self.data[n * len..(n + 1) * len]
    }

    /// Bounding box `(t, h, w)` extents of the nonzero entries, across all
    /// samples and channels. Returns zeros when the tensor is all zero.
    pub fn support_extent(&self) -> (usize, usize, usize) {
        let s = self.shape;
        let (mut lo, mut hi) = ([usize::MAX; 3], [0usize; 3]);
        let mut any = false;
        for (i, &v) in self.data.iter().enumerate() {
            if v != 0.0 {
                any = true;
                let [_, _, t, h, w] = s.unravel(i);
                for (a, x) in [t, h, w].into_iter().enumerate() {
                    lo[a] = lo[a].min(x);
                    hi[a] = hi[a].max(x);
                }
            }
        }
        if !any {
            return (0, 0, 0);
        }
        (hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1)
    }

    /// Writes the dump format: an ASCII header line `T5 N C T H W\n`
    /// followed by the little-endian `f64` payload.
    pub fn write_dump(&self, mut out: impl Write) -> Result<()> {
        let s = self.shape;
        writeln!(out, "T5 {} {} {} {} {}", s.n, s.c, s.t, s.h, s.w)?;
        let mut buf = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
        Ok(())
    }

    pub fn read_dump(mut input: impl Read, origin: &str) -> Result<Self> {
        let bad = |detail: &str| Error::Format {
            path: origin.to_string(),
            detail: detail.to_string(),
        };
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("missing header line"))?;
        let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| bad("header is not ASCII"))?;
        let mut fields = header.split(' ');
        if fields.next() != Some("T5") {
            return Err(bad("header must start with 'T5'"));
        }
        let dims: Vec<usize> = fields
            .map(|f| f.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("non-integer dimension"))?;
        if dims.len() != 5 {
            return Err(bad("header must list five dimensions"));
        }
        let shape = Shape5::new(dims[0], dims[1], dims[2], dims[3], dims[4]);
        let payload = &bytes[nl + 1..];
        if payload.len() != shape.numel() * 8 {
            return Err(bad(&format!(
                "payload has {} bytes, expected {}",
                payload.len(),
                shape.numel() * 8
            )));
        }
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Ok(Self { shape, data })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_dump(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path)?;
        Self::read_dump(std::io::BufReader::new(file), &path.display().to_string())
    }
}
