mod common;

use common::rng;
use lql_core::positional::{apply_rope, build_rope_table, RopeTable, DEFAULT_ROPE_BASE};
use lql_core::tensor::Tensor;
use proptest::prelude::*;
use rand::Rng;

/// Angle of pair `i` at position `p`, straight from the rotary definition.
fn oracle_angle(p: f64, i: usize, head_dim: usize) -> f64 {
    p * DEFAULT_ROPE_BASE.powf(-2.0 * i as f64 / head_dim as f64)
}

#[test]
fn scaled_angles_equal_unscaled_at_interpolated_position() {
    let mut r = rng(40);
    let unscaled = RopeTable::with_scale(64, DEFAULT_ROPE_BASE, 1.0, 0).unwrap();
    for _ in 0..1000 {
        let target = [8192usize, 12288, 16384, 128, 100][r.random_range(0..5)];
        let pretrained = r.random_range(1..=target);
        let s = pretrained as f64 / target as f64;
        let m = r.random_range(0..target);
        let scaled = build_rope_table(64, DEFAULT_ROPE_BASE, pretrained, target, 0).unwrap();
        let eff = m as f64 * s;
        assert_eq!(scaled.effective_position(m), eff);
        let got = scaled.angles(m);
        for (i, a) in got.iter().enumerate() {
            assert_eq!(*a, unscaled.angle_at(eff, i), "m={m} s={s}");
            assert_eq!(*a, oracle_angle(eff, i, 64));
        }
    }
}

#[test]
fn extended_positions_stay_inside_pretraining_range() {
    for (pretrained, target) in [(4096usize, 8192usize), (4096, 12288)] {
        let t = build_rope_table(128, DEFAULT_ROPE_BASE, pretrained, target, 0).unwrap();
        let max_eff = (0..target).map(|m| t.effective_position(m)).fold(0.0, f64::max);
        assert!(max_eff < pretrained as f64, "{pretrained}->{target}: {max_eff}");
        assert_eq!(max_eff, (target - 1) as f64 * pretrained as f64 / target as f64);
    }
}

#[test]
fn table_rows_match_oracle() {
    let t = build_rope_table(8, DEFAULT_ROPE_BASE, 64, 128, 128).unwrap();
    for m in 0..128 {
        let (c, s) = t.row(m).unwrap();
        for i in 0..4 {
            let a = oracle_angle(m as f64 * 0.5, i, 8);
            assert_eq!(c[i], a.cos() as f32);
            assert_eq!(s[i], a.sin() as f32);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scores_depend_only_on_offset(m in 0usize..128, back in 0usize..128, seed in 0u64..1000) {
        let n = m.saturating_sub(back);
        let t = build_rope_table(8, DEFAULT_ROPE_BASE, 64, 128, 128).unwrap();
        let q = Tensor::randn(&[1, 1, 8], 1.0, &mut rng(seed));
        let k = Tensor::randn(&[1, 1, 8], 1.0, &mut rng(seed + 1));
        let dot = |a: &Tensor, b: &Tensor| -> f64 {
            a.data().iter().zip(b.data()).map(|(x, y)| *x as f64 * *y as f64).sum()
        };
        let lhs = dot(&apply_rope(&q, &[m], &t).unwrap(), &apply_rope(&k, &[n], &t).unwrap());
        let rhs = dot(&apply_rope(&q, &[m - n], &t).unwrap(), &k);
        prop_assert!((lhs - rhs).abs() < 1e-5);
    }

    #[test]
    fn rotation_is_norm_preserving(pos in proptest::collection::vec(0usize..32, 1..6), seed in 0u64..1000) {
        let t = build_rope_table(16, DEFAULT_ROPE_BASE, 8, 32, 32).unwrap();
        let x = Tensor::randn(&[pos.len(), 2, 16], 1.0, &mut rng(seed));
        let y = apply_rope(&x, &pos, &t).unwrap();
        for p in 0..x.numel() / 2 {
            let n0 = x.data()[2 * p].hypot(x.data()[2 * p + 1]);
            let n1 = y.data()[2 * p].hypot(y.data()[2 * p + 1]);
            prop_assert!((n0 - n1).abs() < 1e-5);
        }
    }
}
