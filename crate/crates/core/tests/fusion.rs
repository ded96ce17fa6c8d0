use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ksynth::fusion::{FusionMatrix, IR_EPS};
use ksynth::Tensor5;

/// Block rows of the printed shuffle matrices; each block column holds the
/// `G` sub-group selectors of one `T_ij`.
const PRINTED_G4: [&str; 4] = [
    "1000 0100 0010 0001",
    "0001 1000 0100 0010",
    "0010 0001 1000 0100",
    "0100 0010 0001 1000",
];
const PRINTED_G3: [&str; 3] = ["100 010 001", "001 100 010", "010 001 100"];

fn printed_entries(rows: &[&str]) -> Vec<Vec<Vec<f64>>> {
    rows.iter()
        .map(|r| r.split(' ').map(|blk| blk.bytes().map(|b| f64::from(b - b'0')).collect()).collect())
        .collect()
}

#[test]
fn shuffle_reproduces_printed_matrices() {
    for rows in [&PRINTED_G3[..], &PRINTED_G4[..]] {
        let printed = printed_entries(rows);
        let g = printed.len();
        // With c = G every sub-group is a single channel.
        let m = FusionMatrix::shuffle(g, g).unwrap();
        for (i, row) in printed.iter().enumerate() {
            for (j, sel) in row.iter().enumerate() {
                assert_eq!(m.entry(i, j), &sel[..], "G={g} T_{}{}", i + 1, j + 1);
            }
        }
        // Wider groups repeat each selector over a sub-group.
        let wide = FusionMatrix::shuffle(g, 2 * g).unwrap();
        for (i, row) in printed.iter().enumerate() {
            for (j, sel) in row.iter().enumerate() {
                let want: Vec<f64> = sel.iter().flat_map(|&v| [v, v]).collect();
                assert_eq!(wide.entry(i, j), &want[..]);
            }
        }
    }
}

#[test]
fn frozen_matrices_are_not_trainable() {
    for m in [FusionMatrix::grouping(3, 6), FusionMatrix::dropout(3, 6), FusionMatrix::shuffle(3, 6)] {
        assert!(!m.unwrap().is_trainable());
    }
    assert!(FusionMatrix::shuffle(3, 4).is_err());
}

fn channel_codes(g: usize, c: usize) -> Tensor5 {
    Tensor5::from_fn([2, g * c, 2, 2, 3], |[n, ch, t, h, w]| (((n * 100 + ch) * 10 + t) * 10 + h) as f64 * 10.0 + w as f64)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn apply_is_linear(seed in any::<u64>(), g in 1usize..5, c in 1usize..5, a in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = FusionMatrix::zeros(g, c, true).unwrap();
        for i in 0..g {
            for j in 0..g {
                for v in m.entry_mut(i, j) {
                    *v = rand::Rng::random_range(&mut rng, -1.0..1.0);
                }
            }
        }
        let x = Tensor5::uniform([2, g * c, 2, 3, 3], -1.0, 1.0, &mut rng);
        let y = Tensor5::uniform([2, g * c, 2, 3, 3], -1.0, 1.0, &mut rng);
        let mut xy = x.clone();
        xy.axpy(a, &y).unwrap();
        let mut want = m.apply(&x).unwrap();
        want.axpy(a, &m.apply(&y).unwrap()).unwrap();
        prop_assert!(m.apply(&xy).unwrap().max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn shuffle_is_a_channel_permutation(g in 1usize..6, mult in 1usize..4) {
        let c = g * mult;
        let x = channel_codes(g, c);
        let y = FusionMatrix::shuffle(g, c).unwrap().apply(&x).unwrap();
        let mut a = x.data().to_vec();
        let mut b = y.data().to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        prop_assert_eq!(a, b);
        // Every output group draws from all G input groups once.
        let sub = c / g;
        for i in 0..g {
            let mut sources: Vec<usize> = (0..g)
                .map(|k| {
                    let v = y.get(0, i * c + k * sub, 0, 0, 0);
                    (v / 1000.0) as usize / c
                })
                .collect();
            sources.sort_unstable();
            prop_assert_eq!(sources, (0..g).collect::<Vec<_>>());
        }
    }

    #[test]
    fn dropout_rows_are_identical(g in 1usize..5, mult in 1usize..3) {
        let c = g * mult;
        let m = FusionMatrix::dropout(g, c).unwrap();
        let y = m.apply(&channel_codes(g, c)).unwrap();
        for n in 0..2 {
            for i in 1..g {
                for k in 0..c {
                    prop_assert_eq!(y.plane(n, i * c + k), y.plane(n, k));
                }
            }
        }
        prop_assert_eq!(m.ir_interactions(IR_EPS), (g - 1) * c);
    }
}
