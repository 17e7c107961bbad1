//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use lql_core::model::ModelConfig;
use lql_core::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

/// Visibility of key `j` from query `i` under shift short attention with
/// group size `g`, written from the rolled-stream description: shifted heads
/// see the stream rotated left by `g/2`; a key is visible when it shares the
/// query's group in that stream, is not later in the stream, and is not
/// later in the original order. Padding (index ≥ n) is never visible.
pub fn shift_short_visible(n: usize, g: usize, heads: usize, head: usize, i: usize, j: usize) -> bool {
    if j > i || j >= n {
        return false;
    }
    let padded = n.div_ceil(g) * g;
    let shifted = head >= heads - heads / 2 && padded > g;
    if !shifted {
        return i / g == j / g;
    }
    // stream position p holds original index (p + g/2) mod padded
    let pos = |x: usize| (x + padded - g / 2) % padded;
    let (pi, pj) = (pos(i), pos(j));
    pi / g == pj / g && pj <= pi
}

/// Per-position loop over `[seq × heads × hd]` inputs, in f64.
pub fn naive_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    visible: impl Fn(usize, usize, usize) -> bool,
) -> Vec<f64> {
    let n = q.shape()[0];
    let width = q.numel() / n;
    let hd = width / heads;
    let at = |t: &Tensor, pos: usize, h: usize, c: usize| t.data()[pos * width + h * hd + c] as f64;
    let mut out = vec![0.0; n * width];
    for h in 0..heads {
        for i in 0..n {
            let keys: Vec<usize> = (0..n).filter(|&j| visible(h, i, j)).collect();
            let scores: Vec<f64> = keys
                .iter()
                .map(|&j| (0..hd).map(|c| at(q, i, h, c) * at(k, j, h, c)).sum::<f64>() / (hd as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = w.iter().sum();
            for c in 0..hd {
                out[i * width + h * hd + c] = keys.iter().zip(&w).map(|(&j, wj)| wj / z * at(v, j, h, c)).sum();
            }
        }
    }
    out
}

/// Standard normal CDF through the error function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

/// Quantile by bisection on the CDF, independent of any inverse-CDF routine.
pub fn normal_quantile(p: f64) -> f64 {
    let (mut lo, mut hi) = (-10.0f64, 10.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if normal_cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// NF4 levels from bisection quantiles: probabilities evenly spaced from
/// `offset` toward 0.5 (8 on the positive side, 7 on the negative side),
/// plus zero, scaled so the extremes are ±1.
pub fn nf4_oracle() -> Vec<f64> {
    let offset = (1.0 - 1.0 / 30.0 + 1.0 - 1.0 / 32.0) / 2.0;
    let side = |count: usize| -> Vec<f64> {
        (0..count)
            .map(|j| normal_quantile(offset + (0.5 - offset) * j as f64 / count as f64))
            .collect()
    };
    let top = normal_quantile(offset);
    let mut v: Vec<f64> = side(8).into_iter().map(|x| x / top).collect();
    v.extend(side(7).into_iter().map(|x| -x / top));
    v.push(0.0);
    v.sort_by(f64::total_cmp);
    v
}

/// Explicit per-position NLL in f64 via log-sum-exp.
pub fn nll(row: &[f32], target: usize) -> f64 {
    let m = row.iter().map(|&x| x as f64).fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|&x| (x as f64 - m).exp()).sum();
    m + z.ln() - row[target] as f64
}

pub fn tiny_config(seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size: 48,
        d_model: 16,
        n_heads: 4,
        n_layers: 2,
        d_ff: 24,
        pretrained_ctx: 16,
        target_ctx: 32,
        lora_rank: 4,
        quant_block_size: 16,
        seed,
        ..ModelConfig::default()
    }
}

pub fn random_tokens(n: usize, vocab: usize, seed: u64) -> Vec<u32> {
    use rand::Rng;
    let mut r = rng(seed);
    (0..n).map(|_| r.random_range(0..vocab as u32)).collect()
}

/// Fills every adapter `B` with small seeded values so adapters are live.
pub fn randomize_adapters(model: &mut lql_core::model::Model, seed: u64, std: f32) {
    let mut r = rng(seed);
    for ad in model.adapters_mut() {
        let shape = ad.b().shape().to_vec();
        let fresh = Tensor::randn(&shape, std, &mut r);
        ad.b_mut().data_mut().copy_from_slice(fresh.data());
    }
}
