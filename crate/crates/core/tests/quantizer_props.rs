mod common;

use common::{nf4_oracle, rng};
use lql_core::quantizer::{
    build_nf4_codebook, dequantize_tensor, nf4, pack_codes, quantize_tensor, quantize_tensor_with, storage_report,
    unpack_codes, Absmax, QuantizedTensor, StorageReport,
};
use lql_core::tensor::Tensor;
use proptest::prelude::*;
use rand::Rng;

/// Levels of the reference NF4 table used by 4-bit finetuning libraries.
const PUBLISHED_NF4: [f64; 16] = [
    -1.0,
    -0.6961928009986877,
    -0.5250730514526367,
    -0.39491748809814453,
    -0.28444138169288635,
    -0.18477343022823334,
    -0.09105003625154495,
    0.0,
    0.07958029955625534,
    0.16093020141124725,
    0.24611230194568634,
    0.33791524171829224,
    0.44070982933044434,
    0.5626170039176941,
    0.7229568362236023,
    1.0,
];

#[test]
fn codebook_matches_bisection_oracle() {
    let book = build_nf4_codebook();
    let oracle = nf4_oracle();
    for (a, b) in book.levels().iter().zip(&oracle) {
        assert!((*a as f64 - b).abs() < 1e-4, "{a} vs {b}");
    }
    for (a, b) in book.levels().iter().zip(&PUBLISHED_NF4) {
        assert!((*a as f64 - b).abs() < 1e-4, "{a} vs {b}");
    }
}

/// Nearest level by exhaustive scan, lower index on ties.
fn nearest_scan(levels: &[f32; 16], x: f32) -> u8 {
    let mut best = 0u8;
    for c in 1..16u8 {
        if (x - levels[c as usize]).abs() < (x - levels[best as usize]).abs() {
            best = c;
        }
    }
    best
}

#[test]
fn dequantize_equals_per_element_oracle() {
    let mut r = rng(4);
    let x = Tensor::randn(&[37, 29], 2.0, &mut r);
    let q = quantize_tensor(&x, 64, false).unwrap();
    let d = dequantize_tensor(&q).unwrap();
    let levels = nf4().levels();
    for (b, chunk) in x.data().chunks(64).enumerate() {
        let absmax = chunk.iter().fold(0f32, |m, v| m.max(v.abs()));
        for (i, &v) in chunk.iter().enumerate() {
            let code = nearest_scan(levels, v / absmax);
            assert_eq!(d.data()[b * 64 + i], levels[code as usize] * absmax);
        }
    }
}

#[test]
fn million_value_error_bound() {
    let mut r = rng(6);
    let data: Vec<f32> = (0..1_000_000)
        .map(|i| {
            let v: f32 = r.random_range(-1.0..1.0);
            v * (1.0 + (i % 7) as f32)
        })
        .collect();
    let x = Tensor::new(vec![1000, 1000], data).unwrap();
    let gap = nf4().max_gap();
    // exact absmax: error ≤ absmax·g/2
    let q = quantize_tensor(&x, 64, false).unwrap();
    let d = dequantize_tensor(&q).unwrap();
    for (b, (xs, ds)) in x.data().chunks(64).zip(d.data().chunks(64)).enumerate() {
        let absmax = q.absmax().get(b);
        for (a, c) in xs.iter().zip(ds) {
            assert!((a - c).abs() <= absmax * gap / 2.0 * (1.0 + 1e-5), "block {b}: {a} vs {c}");
        }
    }
    // 8-bit absmax adds at most the absmax error, since |level| ≤ 1
    let q = quantize_tensor(&x, 64, true).unwrap();
    let d = dequantize_tensor(&q).unwrap();
    for (b, (xs, ds)) in x.data().chunks(64).zip(d.data().chunks(64)).enumerate() {
        let exact = xs.iter().fold(0f32, |m, v| m.max(v.abs()));
        let slack = (q.absmax().get(b) - exact).abs();
        for (a, c) in xs.iter().zip(ds) {
            assert!((a - c).abs() <= (exact * gap / 2.0 + slack) * (1.0 + 1e-5), "block {b}: {a} vs {c}");
        }
    }
}

#[test]
fn storage_figures() {
    let n = 64 * 256 * 16;
    assert_eq!(StorageReport::predicted(n, 64, false, 256).bits_per_parameter, 4.5);
    let dq = StorageReport::predicted(n, 64, true, 256).bits_per_parameter;
    assert!((dq - 4.12890625).abs() < 1e-12);
    let x = Tensor::randn(&[256, 256], 1.0, &mut rng(1));
    let q = quantize_tensor(&x, 64, true).unwrap();
    assert_eq!(storage_report(&q), StorageReport::predicted(65536, 64, true, 256));
}

#[test]
fn double_quantization_error_is_small() {
    let x = Tensor::randn(&[128, 128], 1.0, &mut rng(2));
    let q = quantize_tensor(&x, 64, true).unwrap();
    let full = quantize_tensor(&x, 64, false).unwrap();
    if let (Absmax::Double { scales, .. }, Absmax::Full(exact)) = (q.absmax(), full.absmax()) {
        for (b, a) in exact.iter().enumerate() {
            let step = scales[b / 256];
            assert!((q.absmax().get(b) - a).abs() <= step / 2.0 * (1.0 + 1e-5) + 1e-7);
        }
    } else {
        panic!("unexpected absmax layout");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pack_round_trip(codes in proptest::collection::vec(0u8..16, 0..300)) {
        let packed = pack_codes(&codes);
        prop_assert_eq!(packed.len(), codes.len().div_ceil(2));
        prop_assert_eq!(unpack_codes(&packed, codes.len()), codes);
    }

    #[test]
    fn section_round_trip(rows in 1usize..20, cols in 1usize..40, block in 1usize..100, dq in any::<bool>(), seed in 0u64..500) {
        let x = Tensor::randn(&[rows, cols], 1.5, &mut rng(seed));
        let q = quantize_tensor_with(&x, block, dq, 7).unwrap();
        let back = QuantizedTensor::read_section(&q.section_bytes(), vec![rows, cols], 7).unwrap();
        prop_assert_eq!(&back, &q);
        prop_assert_eq!(dequantize_tensor(&back).unwrap(), dequantize_tensor(&q).unwrap());
    }

    #[test]
    fn reconstruction_bound(vals in proptest::collection::vec(-1e3f32..1e3, 1..400), block in 1usize..130) {
        let n = vals.len();
        let x = Tensor::new(vec![n], vals).unwrap();
        let q = quantize_tensor(&x, block, false).unwrap();
        let d = dequantize_tensor(&q).unwrap();
        let gap = nf4().max_gap();
        for (i, (a, c)) in x.data().iter().zip(d.data()).enumerate() {
            let absmax = q.absmax().get(i / block);
            prop_assert!((a - c).abs() <= absmax * gap / 2.0 * (1.0 + 1e-5));
        }
    }

    #[test]
    fn codes_are_nearest_levels(vals in proptest::collection::vec(-10f32..10.0, 1..200)) {
        let x = Tensor::new(vec![vals.len()], vals.clone()).unwrap();
        let q = quantize_tensor(&x, 64, false).unwrap();
        let codes = q.codes();
        for (b, chunk) in vals.chunks(64).enumerate() {
            let absmax = chunk.iter().fold(0f32, |m, v| m.max(v.abs()));
            for (i, v) in chunk.iter().enumerate() {
                let want = if absmax == 0.0 { nf4().zero_code() } else { nearest_scan(nf4().levels(), v / absmax) };
                prop_assert_eq!(codes[b * 64 + i], want);
            }
        }
    }
}
