mod common;

use common::{naive_attention, randn, shift_short_visible};
use lql_core::attention::{
    attention_stats, global_causal_attention, head_blocks, shift_short_attention, AttentionPattern,
};
use lql_core::tensor::Graph;
use proptest::prelude::*;

fn qkv(n: usize, heads: usize, hd: usize, seed: u64) -> (lql_core::tensor::Tensor, lql_core::tensor::Tensor, lql_core::tensor::Tensor) {
    (
        randn(&[n, heads, hd], seed),
        randn(&[n, heads, hd], seed + 1),
        randn(&[n, heads, hd], seed + 2),
    )
}

#[test]
fn shift_short_matches_rolled_stream_oracle() {
    for &(n, g, heads) in &[(8, 4, 2), (16, 4, 4), (12, 4, 3), (10, 4, 2), (16, 8, 5), (6, 2, 2)] {
        let (q, k, v) = qkv(n, heads, 4, n as u64 * 31 + g as u64);
        let got = shift_short_attention(&q, &k, &v, g).unwrap();
        let want = naive_attention(&q, &k, &v, heads, |h, i, j| shift_short_visible(n, g, heads, h, i, j));
        for (a, b) in got.data().iter().zip(&want) {
            assert!((*a as f64 - b).abs() < 1e-5, "n={n} g={g}: {a} vs {b}");
        }
    }
}

#[test]
fn global_matches_causal_oracle() {
    let (q, k, v) = qkv(8, 2, 4, 5);
    let got = global_causal_attention(&q, &k, &v).unwrap();
    let want = naive_attention(&q, &k, &v, 2, |_, i, j| j <= i);
    for (a, b) in got.data().iter().zip(&want) {
        assert!((*a as f64 - b).abs() < 1e-5);
    }
}

#[test]
fn example_receptive_fields() {
    // unshifted head: token 5 ignores tokens 0..4; shifted head: ignores 0..2
    let blocks0 = head_blocks(8, 2, 0, AttentionPattern::ShiftShort { group_size: 4 });
    assert_eq!(blocks0, vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7]]);
    for i in 0..8 {
        for j in 0..8 {
            let vis = shift_short_visible(8, 4, 2, 1, i, j);
            if i == 5 {
                assert_eq!(vis, (2..=5).contains(&j), "j={j}");
            }
        }
    }
}

/// Output at `i` for head `h` changes when v at `j` changes iff `j` is visible.
fn receptive_field_matches(n: usize, g: usize, heads: usize, seed: u64) {
    let (q, k, v) = qkv(n, heads, 2, seed);
    let base = shift_short_attention(&q, &k, &v, g).unwrap();
    let width = heads * 2;
    for j in 0..n {
        let mut v2 = v.clone();
        for c in 0..width {
            v2.data_mut()[j * width + c] += 3.0;
        }
        let out = shift_short_attention(&q, &k, &v2, g).unwrap();
        for i in 0..n {
            for h in 0..heads {
                let changed = (0..2).any(|c| {
                    let idx = i * width + h * 2 + c;
                    out.data()[idx] != base.data()[idx]
                });
                assert_eq!(
                    changed,
                    shift_short_visible(n, g, heads, h, i, j),
                    "n={n} g={g} head={h} i={i} j={j}"
                );
            }
        }
    }
}

#[test]
fn exhaustive_locality_small_sequences() {
    for n in 2..=16 {
        for g in (2..=n).step_by(2) {
            receptive_field_matches(n, g, 3, (n * 100 + g) as u64);
        }
    }
}

#[test]
fn measured_buffers_match_stats() {
    for &(n, g) in &[(8, 4), (16, 4), (12, 8), (32, 8)] {
        let (q, k, v) = qkv(n, 4, 2, 9);
        let flat = |t: lql_core::tensor::Tensor| t.reshape(vec![n, 8]).unwrap();
        let (q, k, v) = (flat(q), flat(k), flat(v));
        let mut graph = Graph::<f32>::new();
        let (qv, kv, vv) = (graph.constant(&q), graph.constant(&k), graph.constant(&v));
        let pattern = AttentionPattern::ShiftShort { group_size: g };
        graph.attention(qv, kv, vv, 4, pattern).unwrap();
        assert_eq!(graph.attention_stats()[0], attention_stats(n, pattern, 4).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn single_group_is_global(n in 1usize..=32, heads in 1usize..=4, seed in 0u64..1000) {
        let n = n * 2;
        let (q, k, v) = qkv(n, heads, 4, seed);
        let a = shift_short_attention(&q, &k, &v, n).unwrap();
        let b = global_causal_attention(&q, &k, &v).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn no_future_dependence(n in 2usize..=16, gi in 1usize..=8, seed in 0u64..1000, global in any::<bool>()) {
        let g = (gi * 2).min(n - n % 2).max(2);
        let (q, k, v) = qkv(n, 2, 2, seed);
        let run = |q: &_, k: &_, v: &_| if global {
            global_causal_attention(q, k, v).unwrap()
        } else {
            shift_short_attention(q, k, v, g).unwrap()
        };
        let base = run(&q, &k, &v);
        let cut = n / 2;
        let (mut q2, mut k2, mut v2) = (q.clone(), k.clone(), v.clone());
        for t in [&mut q2, &mut k2, &mut v2] {
            for x in &mut t.data_mut()[cut * 4..] {
                *x = -*x + 1.0;
            }
        }
        let out = run(&q2, &k2, &v2);
        prop_assert_eq!(&out.data()[..cut * 4], &base.data()[..cut * 4]);
    }

    #[test]
    fn rows_are_convex_combinations(n in 1usize..=12, seed in 0u64..1000) {
        // with v constant per channel, every output equals that constant
        let (q, k, _) = qkv(n, 2, 2, seed);
        let mut v = q.clone();
        for (i, x) in v.data_mut().iter_mut().enumerate() {
            *x = (i % 4) as f32;
        }
        let out = global_causal_attention(&q, &k, &v).unwrap();
        for (i, x) in out.data().iter().enumerate() {
            prop_assert!((x - (i % 4) as f32).abs() < 1e-5);
        }
    }
}
