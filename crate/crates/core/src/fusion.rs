//! The block transformation `Y = T x X` between grouped spatial features and
//! the temporal kernel bag.
//!
//! `T` is a `G x G` grid whose entries `T_ij` are `c`-length channel-weight
//! vectors (`c = C / G`). Output group `i` is `Y_i = sum_j T_ij * X_j`, the
//! product being channel-wise. Channel grouping, channel dropout and channel
//! shuffling are all frozen instances of `T`.

use std::io::Write;

use crate::error::{config_err, dim_err, Result};
use crate::tensor::{Shape5, Tensor5};

/// Default threshold under which a routed channel counts as absent.
pub const IR_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct FusionMatrix {
    groups: usize,
    width: usize,
    data: Vec<f64>,
    trainable: bool,
}

impl FusionMatrix {
    /// All-zero matrix; trainable matrices start here so the residual block is the identity.
    pub fn zeros(groups: usize, width: usize, trainable: bool) -> Result<Self> {
        if groups == 0 || width == 0 {
            return Err(config_err!("fusion matrix needs G >= 1 and c >= 1, got G={groups} c={width}"));
        }
        Ok(Self {
            groups,
            width,
            data: vec![0.0; groups * groups * width],
            trainable,
        })
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    /// Channels per group, `c`.
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.groups * self.width
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    fn idx(&self, i: usize, j: usize) -> usize {
        (i * self.groups + j) * self.width
    }

    /// `T_ij` (0-based indices).
    pub fn entry(&self, i: usize, j: usize) -> &[f64] {
        let s = self.idx(i, j);
        &self.data[s..s + self.width]
    }

    pub fn entry_mut(&mut self, i: usize, j: usize) -> &mut [f64] {
        let s = self.idx(i, j);
        &mut self.data[s..s + self.width]
    }

    /// Tensor layout used on the tape: shape `(G, G, c, 1, 1)`.
    pub fn to_tensor(&self) -> Tensor5 {
        Tensor5::from_vec([self.groups, self.groups, self.width, 1, 1], self.data.clone())
            .expect("consistent fusion layout")
    }

    pub fn from_tensor(t: &Tensor5, trainable: bool) -> Result<Self> {
        let s = t.shape();
        if s.n != s.c || s.h != 1 || s.w != 1 || s.n == 0 || s.t == 0 {
            return Err(dim_err!("fusion tensor must have shape (G, G, c, 1, 1), got {s:?}"));
        }
        Ok(Self {
            groups: s.n,
            width: s.t,
            data: t.data().to_vec(),
            trainable,
        })
    }

    fn require_subgroups(groups: usize, width: usize) -> Result<usize> {
        if groups == 0 || width == 0 || !width.is_multiple_of(groups) {
            return Err(config_err!(
                "sub-group structure needs G | c, got G={groups} c={width}"
            ));
        }
        Ok(width / groups)
    }

    /// Frozen matrix with `T_ij(k) = 1` whenever `pick(i, j, k)` holds (0-based).
    fn from_subgroup_rule(groups: usize, width: usize, pick: impl Fn(usize, usize, usize) -> bool) -> Result<Self> {
        let sub = Self::require_subgroups(groups, width)?;
        let mut m = Self::zeros(groups, width, false)?;
        for i in 0..groups {
            for j in 0..groups {
                for k in 0..groups {
                    if pick(i, j, k) {
                        m.entry_mut(i, j)[k * sub..(k + 1) * sub].fill(1.0);
                    }
                }
            }
        }
        Ok(m)
    }

    /// Channel grouping: `T_ij = 1` iff `i == j`.
    pub fn grouping(groups: usize, width: usize) -> Result<Self> {
        let mut m = Self::zeros(groups, width, false)?;
        for i in 0..groups {
            m.entry_mut(i, i).fill(1.0);
        }
        Ok(m)
    }

    /// Channel dropout: `T_ij(k) = 1` iff `k == j`, so every output group is
    /// `X_1(1) + X_2(2) + ... + X_G(G)` (concatenated sub-groups).
    pub fn dropout(groups: usize, width: usize) -> Result<Self> {
        Self::from_subgroup_rule(groups, width, |_, j, k| k == j)
    }

    /// Channel shuffling: row `i` selects sub-group `k = j - i + 1 (mod G)`
    /// (1-based) from input group `j`, i.e. `T_11(1), T_12(2), ...`,
    /// `T_21(G), T_22(1), ...`.
    pub fn shuffle(groups: usize, width: usize) -> Result<Self> {
        Self::from_subgroup_rule(groups, width, |i, j, k| k == (j + groups - i) % groups)
    }

    /// Builds `T` from the `G`-element grid `W` of `C`-length vectors by
    /// cutting each `W(i)` into `G` consecutive pieces `T_i1 .. T_iG`.
    pub fn from_w(w: &[Vec<f64>], trainable: bool) -> Result<Self> {
        let groups = w.len();
        let channels = w.first().map_or(0, Vec::len);
        if groups == 0 || channels == 0 || !channels.is_multiple_of(groups) {
            return Err(config_err!(
                "weight grid of {groups} vectors of length {channels} cannot be split into G groups"
            ));
        }
        if w.iter().any(|v| v.len() != channels) {
            return Err(dim_err!("weight grid vectors have unequal lengths"));
        }
        Ok(Self {
            groups,
            width: channels / groups,
            data: w.concat(),
            trainable,
        })
    }

    /// Inverse of [`FusionMatrix::from_w`].
    pub fn to_w(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.channels()).map(<[f64]>::to_vec).collect()
    }

    pub fn subgroups(&self) -> Result<SubgroupView<'_>> {
        let sub = Self::require_subgroups(self.groups, self.width)?;
        Ok(SubgroupView { matrix: self, sub })
    }

    /// `Y = T x X` on a tensor with `G * c` channels.
    pub fn apply(&self, x: &Tensor5) -> Result<Tensor5> {
        apply_raw(&self.to_tensor(), x)
    }

    /// Number of channels routed between distinct groups: the count over
    /// `i != j` of positions `k` with `|T_ij[k]| > eps`.
    pub fn ir_interactions(&self, eps: f64) -> usize {
        let mut count = 0;
        for i in 0..self.groups {
            for j in 0..self.groups {
                if i != j {
                    count += self.entry(i, j).iter().filter(|v| v.abs() > eps).count();
                }
            }
        }
        count
    }

    /// Fraction of input channels that reach no output group.
    pub fn unused_input_fraction(&self) -> f64 {
        let mut unused = 0;
        for j in 0..self.groups {
            for k in 0..self.width {
                if (0..self.groups).all(|i| self.entry(i, j)[k] == 0.0) {
                    unused += 1;
                }
            }
        }
        unused as f64 / self.channels() as f64
    }

    /// Softmax over the sub-group axis `k`: for each `(i, j)` and each position
    /// inside a sub-group, the `G` weights become a probability vector.
    pub fn softmax_k(&self) -> Result<Self> {
        let sub = Self::require_subgroups(self.groups, self.width)?;
        let mut out = self.clone();
        for i in 0..self.groups {
            for j in 0..self.groups {
                let src = self.entry(i, j);
                let dst = out.entry_mut(i, j);
                for r in 0..sub {
                    let m = (0..self.groups).map(|k| src[k * sub + r]).fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = (0..self.groups).map(|k| (src[k * sub + r] - m).exp()).sum();
                    for k in 0..self.groups {
                        dst[k * sub + r] = (src[k * sub + r] - m).exp() / z;
                    }
                }
            }
        }
        Ok(out)
    }

    /// `G x G` matrix of `||T_ij||_1`.
    pub fn l1_importance(&self) -> Vec<Vec<f64>> {
        (0..self.groups)
            .map(|i| {
                (0..self.groups)
                    .map(|j| self.entry(i, j).iter().map(|v| v.abs()).sum())
                    .collect()
            })
            .collect()
    }

    /// CSV with header `i,j,l1`, one row per entry, 1-based indices.
    pub fn write_l1_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "i,j,l1")?;
        for (i, row) in self.l1_importance().iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                writeln!(out, "{},{},{}", i + 1, j + 1, v)?;
            }
        }
        Ok(())
    }
}

/// Each `T_ij` viewed as `G` consecutive sub-vectors of length `c / G`.
pub struct SubgroupView<'a> {
    matrix: &'a FusionMatrix,
    sub: usize,
}

impl SubgroupView<'_> {
    pub fn sub_width(&self) -> usize {
        self.sub
    }

    /// `T_ij(k)` (0-based).
    pub fn part(&self, i: usize, j: usize, k: usize) -> &[f64] {
        &self.matrix.entry(i, j)[k * self.sub..(k + 1) * self.sub]
    }

    /// Whether `T_ij(k)` is the all-one vector.
    pub fn is_one(&self, i: usize, j: usize, k: usize) -> bool {
        self.part(i, j, k).iter().all(|&v| v == 1.0)
    }

    pub fn is_zero(&self, i: usize, j: usize, k: usize) -> bool {
        self.part(i, j, k).iter().all(|&v| v == 0.0)
    }

    /// Concatenation of `T_ij(1) .. T_ij(G)`.
    pub fn reassemble(&self, i: usize, j: usize) -> Vec<f64> {
        (0..self.matrix.groups).flat_map(|k| self.part(i, j, k).to_vec()).collect()
    }
}

/// Rank-1 factorization of a `G x G` grid of channel weights:
/// `WW_ij = W'(i) * W(j)` (elementwise on `C`-length vectors).
#[derive(Clone, Debug, PartialEq)]
pub struct RankOnePair {
    /// Temporal-side factor, `G` vectors of length `C`.
    pub w_prime: Vec<Vec<f64>>,
    /// Spatial-side factor, `G` vectors of length `C`.
    pub w: Vec<Vec<f64>>,
}

impl RankOnePair {
    pub fn new(w_prime: Vec<Vec<f64>>, w: Vec<Vec<f64>>) -> Result<Self> {
        let c = w.first().map_or(0, Vec::len);
        if w_prime.len() != w.len() || w.is_empty() || c == 0 {
            return Err(dim_err!("rank-1 factors need equal, nonzero G"));
        }
        if w.iter().chain(&w_prime).any(|v| v.len() != c) {
            return Err(dim_err!("rank-1 factor vectors must all have length C"));
        }
        Ok(Self { w_prime, w })
    }

    pub fn groups(&self) -> usize {
        self.w.len()
    }

    /// The full `G x G` grid, indexed `[i][j]`.
    pub fn product(&self) -> Vec<Vec<Vec<f64>>> {
        self.w_prime
            .iter()
            .map(|wp| {
                self.w
                    .iter()
                    .map(|w| wp.iter().zip(w).map(|(a, b)| a * b).collect())
                    .collect()
            })
            .collect()
    }
}

fn check_apply(t: Shape5, x: Shape5) -> Result<(usize, usize)> {
    let (g, c) = (t.n, t.t);
    if t.c != g || t.h != 1 || t.w != 1 {
        return Err(dim_err!("fusion tensor must have shape (G, G, c, 1, 1), got {t:?}"));
    }
    if x.c != g * c {
        return Err(config_err!(
            "input has {} channels, fusion expects G*c = {}*{} = {}",
            x.c,
            g,
            c,
            g * c
        ));
    }
    Ok((g, c))
}

/// `Y_i = sum_j T_ij * X_j` with `T` as a `(G, G, c, 1, 1)` tensor.
pub fn apply_raw(t: &Tensor5, x: &Tensor5) -> Result<Tensor5> {
    let (g, c) = check_apply(t.shape(), x.shape())?;
    let s = x.shape();
    let mut y = Tensor5::zeros(s);
    for n in 0..s.n {
        for i in 0..g {
            for k in 0..c {
                let out_c = i * c + k;
                for j in 0..g {
                    let wt = t.data()[(i * g + j) * c + k];
                    let src = x.plane(n, j * c + k);
                    for (d, v) in y.plane_mut(n, out_c).iter_mut().zip(src) {
                        *d += wt * v;
                    }
                }
            }
        }
    }
    Ok(y)
}

pub fn apply_raw_backward(
    t: &Tensor5,
    x: &Tensor5,
    grad_out: &Tensor5,
    need_x: bool,
    need_t: bool,
) -> Result<(Option<Tensor5>, Option<Tensor5>)> {
    let (g, c) = check_apply(t.shape(), x.shape())?;
    let s = x.shape();
    let mut dx = need_x.then(|| Tensor5::zeros(s));
    let mut dt = need_t.then(|| Tensor5::zeros(t.shape()));
    for n in 0..s.n {
        for i in 0..g {
            for k in 0..c {
                let gy = grad_out.plane(n, i * c + k);
                for j in 0..g {
                    let ti = (i * g + j) * c + k;
                    if let Some(dx) = dx.as_mut() {
                        let wt = t.data()[ti];
                        for (d, &v) in dx.plane_mut(n, j * c + k).iter_mut().zip(gy) {
                            *d += wt * v;
                        }
                    }
                    if let Some(dt) = dt.as_mut() {
                        let xs = x.plane(n, j * c + k);
                        dt.data_mut()[ti] += gy.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
        }
    }
    Ok((dx, dt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(g: usize, c: usize, rng: &mut impl Rng) -> FusionMatrix {
        let t = Tensor5::uniform([g, g, c, 1, 1], -1.0, 1.0, rng);
        FusionMatrix::from_tensor(&t, true).unwrap()
    }

    #[test]
    fn scalar_two_by_two() {
        let mut m = FusionMatrix::zeros(2, 1, false).unwrap();
        m.entry_mut(0, 0)[0] = 1.0;
        m.entry_mut(0, 1)[0] = 2.0;
        m.entry_mut(1, 0)[0] = 3.0;
        m.entry_mut(1, 1)[0] = 4.0;
        let x = Tensor5::full([1, 2, 2, 2, 2], 1.0);
        let y = m.apply(&x).unwrap();
        assert!(y.plane(0, 0).iter().all(|&v| v == 3.0));
        assert!(y.plane(0, 1).iter().all(|&v| v == 7.0));
    }

    #[test]
    fn zero_matrix_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor5::uniform([2, 6, 2, 2, 2], -1.0, 1.0, &mut rng);
        let y = FusionMatrix::zeros(3, 2, true).unwrap().apply(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn apply_matches_quadruple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (g, c) = (3, 2);
        let m = random_matrix(g, c, &mut rng);
        let x = Tensor5::uniform([2, g * c, 2, 3, 2], -1.0, 1.0, &mut rng);
        let y = m.apply(&x).unwrap();
        let s = x.shape();
        for n in 0..s.n {
            for i in 0..g {
                for k in 0..c {
                    for p in 0..s.volume() {
                        let mut acc = 0.0;
                        for j in 0..g {
                            acc += m.entry(i, j)[k] * x.plane(n, j * c + k)[p];
                        }
                        assert!((y.plane(n, i * c + k)[p] - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn divisibility_violations_are_config_errors() {
        assert!(matches!(FusionMatrix::dropout(3, 4), Err(crate::Error::Config(_))));
        assert!(matches!(FusionMatrix::shuffle(2, 3), Err(crate::Error::Config(_))));
        let m = FusionMatrix::grouping(2, 2).unwrap();
        assert!(matches!(m.apply(&Tensor5::zeros([1, 5, 1, 1, 1])), Err(crate::Error::Config(_))));
    }

    #[test]
    fn grouping_layout_and_metrics() {
        let m = FusionMatrix::grouping(4, 3).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!(m.entry(i, j).iter().all(|&v| v == want));
            }
        }
        assert_eq!(m.ir_interactions(IR_EPS), 0);
        let l1 = m.l1_importance();
        assert_eq!(l1[2][2], 3.0);
        assert_eq!(l1[0][3], 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor5::uniform([2, 12, 2, 2, 2], -1.0, 1.0, &mut rng);
        assert!(m.apply(&x).unwrap().bit_eq(&x));
    }

    #[test]
    fn dropout_outputs_identical_groups() {
        let (g, c) = (4, 8);
        let m = FusionMatrix::dropout(g, c).unwrap();
        assert_eq!(m.unused_input_fraction(), 0.75);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor5::uniform([1, g * c, 2, 2, 2], -1.0, 1.0, &mut rng);
        let y = m.apply(&x).unwrap();
        for i in 1..g {
            for k in 0..c {
                assert!(y.plane(0, k).iter().zip(y.plane(0, i * c + k)).all(|(a, b)| a.to_bits() == b.to_bits()));
            }
        }
        // Y_i = X_1(1) (+) X_2(2) (+) ... with sub-group width c / G.
        let sub = c / g;
        for k in 0..c {
            let j = k / sub;
            assert_eq!(y.plane(0, k), x.plane(0, j * c + k));
        }
        let single = FusionMatrix::dropout(1, 3).unwrap();
        assert_eq!(single, FusionMatrix::grouping(1, 3).unwrap());
    }

    #[test]
    fn shuffle_matches_printed_three_group_matrix() {
        // Rows of the printed G=3 matrix: 1 marks T_ij(k) = 1, columns ordered (j, k).
        let printed = [
            [1, 0, 0, 0, 1, 0, 0, 0, 1],
            [0, 0, 1, 1, 0, 0, 0, 1, 0],
            [0, 1, 0, 0, 0, 1, 1, 0, 0],
        ];
        let m = FusionMatrix::shuffle(3, 3).unwrap();
        let v = m.subgroups().unwrap();
        for (i, row) in printed.iter().enumerate() {
            for j in 0..3 {
                for k in 0..3 {
                    assert_eq!(v.is_one(i, j, k), row[j * 3 + k] == 1, "T_{}{}({})", i + 1, j + 1, k + 1);
                    assert_eq!(v.is_zero(i, j, k), row[j * 3 + k] == 0);
                }
            }
        }
        // Row 2 is T_21(3) = T_22(1) = T_23(2) = 1.
        assert!(v.is_one(1, 0, 2) && v.is_one(1, 1, 0) && v.is_one(1, 2, 1));
    }

    #[test]
    fn shuffle_ir_interactions_literal_count() {
        assert_eq!(FusionMatrix::shuffle(4, 4).unwrap().ir_interactions(IR_EPS), 12);
        for (g, c) in [(2, 2), (3, 6), (4, 8)] {
            assert_eq!(FusionMatrix::shuffle(g, c).unwrap().ir_interactions(IR_EPS), (g - 1) * c);
        }
        assert_eq!(FusionMatrix::zeros(3, 3, true).unwrap().ir_interactions(IR_EPS), 0);
    }

    #[test]
    fn w_reshape_index_map() {
        let w = vec![vec![1.0, 2.0, 3.0, 4.0], vec![5.0, 6.0, 7.0, 8.0]];
        let m = FusionMatrix::from_w(&w, true).unwrap();
        assert_eq!(m.entry(0, 0), &[1.0, 2.0]);
        assert_eq!(m.entry(0, 1), &[3.0, 4.0]);
        assert_eq!(m.entry(1, 0), &[5.0, 6.0]);
        assert_eq!(m.to_w(), w);
        let single = FusionMatrix::from_w(&[vec![0.5, -1.0]], true).unwrap();
        assert_eq!(single.entry(0, 0), &[0.5, -1.0]);
        assert!(FusionMatrix::from_w(&[vec![1.0; 3], vec![1.0; 3]], true).is_err());
    }

    #[test]
    fn softmax_uniform_saturating_and_positive() {
        let (g, c) = (4, 8);
        let m = FusionMatrix::zeros(g, c, true).unwrap().softmax_k().unwrap();
        assert!(m.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        for row in m.l1_importance() {
            for v in row {
                assert!((v - (c / g) as f64).abs() < 1e-12 && v > 0.0);
            }
        }
        let mut logits = FusionMatrix::zeros(2, 2, true).unwrap();
        logits.entry_mut(0, 1)[1] = 100.0;
        let s = logits.softmax_k().unwrap();
        assert!((s.entry(0, 1)[1] - 1.0).abs() < 1e-12);
        assert!(s.entry(0, 1)[0] < 1e-40);
    }

    #[test]
    fn l1_matches_naive_sum_and_csv_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let m = random_matrix(3, 2, &mut rng);
        let l1 = m.l1_importance();
        for i in 0..3 {
            for j in 0..3 {
                let naive = m.data()[(i * 3 + j) * 2].abs() + m.data()[(i * 3 + j) * 2 + 1].abs();
                assert!((l1[i][j] - naive).abs() < 1e-12);
            }
        }
        let mut buf = Vec::new();
        FusionMatrix::zeros(2, 1, true).unwrap().write_l1_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "i,j,l1\n1,1,0\n1,2,0\n2,1,0\n2,2,0\n");
    }

    #[test]
    fn subgroup_view_reassembles() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_matrix(2, 4, &mut rng);
        let v = m.subgroups().unwrap();
        assert_eq!(v.sub_width(), 2);
        assert_eq!(v.reassemble(1, 0), m.entry(1, 0));
    }

    #[test]
    fn apply_is_linear_in_matrix_and_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = random_matrix(2, 3, &mut rng);
        let b = random_matrix(2, 3, &mut rng);
        let x = Tensor5::uniform([1, 6, 2, 2, 2], -1.0, 1.0, &mut rng);
        let z = Tensor5::uniform([1, 6, 2, 2, 2], -1.0, 1.0, &mut rng);
        let mut sum_t = a.to_tensor();
        sum_t.axpy(2.0, &b.to_tensor()).unwrap();
        let lhs = apply_raw(&sum_t, &x).unwrap();
        let mut rhs = a.apply(&x).unwrap();
        rhs.axpy(2.0, &b.apply(&x).unwrap()).unwrap();
        assert!(lhs.max_rel_dev(&rhs).unwrap() < 1e-12);
        let mut xz = x.clone();
        xz.axpy(-0.5, &z).unwrap();
        let lhs = a.apply(&xz).unwrap();
        let mut rhs = a.apply(&x).unwrap();
        rhs.axpy(-0.5, &a.apply(&z).unwrap()).unwrap();
        assert!(lhs.max_rel_dev(&rhs).unwrap() < 1e-12);
    }

    #[test]
    fn rank_one_product_shape() {
        let p = RankOnePair::new(vec![vec![1.0, 2.0], vec![3.0, 4.0]], vec![vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
        let full = p.product();
        assert_eq!(full.len(), 2);
        assert_eq!(full[1][0], vec![15.0, 24.0]);
    }
}
