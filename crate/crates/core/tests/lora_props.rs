mod common;

use common::{rng, tiny_config};
use lql_core::lora::{adapted_forward, init_adapter, merge_adapter, trainable_param_count};
use lql_core::model::build_model;
use lql_core::quantizer::{dequantize_tensor, quantize_tensor};
use lql_core::tensor::{matmul, Tensor};
use proptest::prelude::*;

/// Numerical rank by Gaussian elimination with full pivoting in f64.
fn numerical_rank(m: &Tensor) -> usize {
    let (rows, cols) = m.dims2().unwrap();
    let mut a: Vec<f64> = m.data().iter().map(|&v| v as f64).collect();
    let scale = a.iter().fold(0f64, |s, v| s.max(v.abs()));
    if scale == 0.0 {
        return 0;
    }
    let tol = scale * 1e-5;
    let mut rank = 0;
    let mut used_rows = vec![false; rows];
    let mut used_cols = vec![false; cols];
    loop {
        let mut best = (0.0, 0, 0);
        for r in (0..rows).filter(|&r| !used_rows[r]) {
            for c in (0..cols).filter(|&c| !used_cols[c]) {
                if a[r * cols + c].abs() > best.0 {
                    best = (a[r * cols + c].abs(), r, c);
                }
            }
        }
        if best.0 <= tol {
            return rank;
        }
        let (_, pr, pc) = best;
        used_rows[pr] = true;
        used_cols[pc] = true;
        rank += 1;
        let pivot = a[pr * cols + pc];
        for r in (0..rows).filter(|&r| !used_rows[r]) {
            let f = a[r * cols + pc] / pivot;
            for c in 0..cols {
                a[r * cols + c] -= f * a[pr * cols + c];
            }
        }
    }
}

#[test]
fn rank_oracle_sanity() {
    assert_eq!(numerical_rank(&Tensor::identity(5)), 5);
    assert_eq!(numerical_rank(&Tensor::zeros(&[3, 4])), 0);
    let outer = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 2.0, 4.0, 6.0]).unwrap();
    assert_eq!(numerical_rank(&outer), 1);
}

#[test]
fn model_trainable_count_matches_formula() {
    let cfg = tiny_config(3);
    let model = build_model(&cfg).unwrap();
    let counted: usize = model.adapters().map(|a| a.param_count()).sum();
    assert_eq!(model.trainable_param_count(), counted);
    assert_eq!(counted, trainable_param_count(cfg.d_model, cfg.d_ff, cfg.n_layers, cfg.lora_rank));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn delta_rank_is_bounded(d_in in 4usize..20, d_out in 4usize..20, rank in 1usize..4, seed in 0u64..1000) {
        let mut ad = init_adapter(d_in, d_out, rank, 16.0, seed).unwrap();
        let b = Tensor::randn(&[d_out, rank], 1.0, &mut rng(seed + 7));
        ad.b_mut().data_mut().copy_from_slice(b.data());
        let delta = ad.delta();
        prop_assert_eq!(delta.shape(), &[d_out, d_in][..]);
        let r = numerical_rank(&delta);
        prop_assert!(r <= rank, "rank {} > {}", r, rank);
        prop_assert_eq!(r, rank);
    }

    #[test]
    fn merged_weights_reproduce_adapted_output(d_in in 2usize..24, d_out in 2usize..24, seed in 0u64..1000) {
        let rank = 1 + seed as usize % d_in.min(d_out);
        let w = Tensor::randn(&[d_out, d_in], 0.5, &mut rng(seed));
        let base = quantize_tensor(&w, 16, seed % 2 == 0).unwrap();
        let mut ad = init_adapter(d_in, d_out, rank, 16.0, seed + 1).unwrap();
        let b = Tensor::randn(&[d_out, rank], 0.2, &mut rng(seed + 2));
        ad.b_mut().data_mut().copy_from_slice(b.data());
        let x = Tensor::randn(&[3, d_in], 1.0, &mut rng(seed + 3));
        let y = adapted_forward(&x, &base, &ad).unwrap();
        let merged = merge_adapter(&base, &ad).unwrap();
        let ym = matmul(&x, &merged.transpose2().unwrap()).unwrap();
        for (p, q) in y.data().iter().zip(ym.data()) {
            prop_assert!((p - q).abs() <= 1e-4 * (1.0 + q.abs()));
        }
        // with B = 0 the merged weight is exactly the dequantized base
        let fresh = init_adapter(d_in, d_out, rank, 16.0, seed).unwrap();
        prop_assert_eq!(merge_adapter(&base, &fresh).unwrap(), dequantize_tensor(&base).unwrap());
    }
}
