//! Causal global attention and shift short attention.
//!
//! Shift short attention splits the sequence into groups of `G` tokens and
//! attends causally inside each group only. The first half of the heads
//! (rounded up) use groups aligned at 0. The remaining heads see the token
//! stream rolled left by `G/2`, so their groups straddle the boundaries of the
//! aligned groups and carry information between neighbours. The group that
//! wraps around holds the suffix `[n−G/2, n)` followed by the prefix
//! `[0, G/2)`; pairs across those two segments are masked, which keeps every
//! head causal.
//!
//! When the padded sequence is a single group no head is rolled, so
//! `G = n` reduces to ordinary causal attention.
//!
//! Sequences whose length is not a multiple of `G` are padded on the right
//! with positions that are never attended and whose outputs are dropped.
//!
//! Inside a group, key `b` is visible to query `a` iff `b` is not after `a` in
//! the group order and the original index of `b` is not after the original
//! index of `a`. For aligned groups both conditions coincide with ordinary
//! causality; for the wrapped group the second condition removes exactly the
//! cross-segment pairs.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{kernels, Element, Tensor};

/// Which attention is used for a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttentionPattern {
    Global,
    ShiftShort { group_size: usize },
}

impl AttentionPattern {
    pub fn name(&self) -> &'static str {
        match self {
            AttentionPattern::Global => "global",
            AttentionPattern::ShiftShort { .. } => "shift_short",
        }
    }

    /// Checks the pattern against a sequence length.
    pub fn validate(&self, n: usize) -> Result<()> {
        if let AttentionPattern::ShiftShort { group_size: g } = *self {
            if g < 2 || g % 2 != 0 {
                return Err(Error::config(format!("group size must be even and ≥ 2, got {g}")));
            }
            if g > n {
                return Err(Error::config(format!(
                    "group size {g} exceeds the sequence length {n}"
                )));
            }
        }
        Ok(())
    }

    /// The pattern to use on a sequence of `n` tokens. A sequence shorter
    /// than one group is a single padded group, which is global attention.
    pub fn clamp_to(self, n: usize) -> Self {
        match self {
            AttentionPattern::ShiftShort { group_size } if group_size > n => AttentionPattern::Global,
            p => p,
        }
    }
}

impl fmt::Display for AttentionPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttentionPattern::Global => write!(f, "global"),
            AttentionPattern::ShiftShort { group_size } => write!(f, "shift_short(G={group_size})"),
        }
    }
}

/// Pattern kind as named on the command line; the group size is resolved
/// from the model configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternKind {
    Global,
    ShiftShort,
}

impl FromStr for PatternKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(PatternKind::Global),
            "shift_short" => Ok(PatternKind::ShiftShort),
            other => Err(Error::config(format!(
                "unknown attention pattern '{other}' (expected global | shift_short)"
            ))),
        }
    }
}

impl fmt::Display for PatternKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PatternKind::Global => "global",
            PatternKind::ShiftShort => "shift_short",
        })
    }
}

/// Exact score-matrix bookkeeping for one attention call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionStats {
    pub seq_len: usize,
    pub heads: usize,
    /// Score entries computed per head (masked entries of a block included).
    pub score_elements_per_head: u64,
    pub score_elements_total: u64,
    /// Largest single score block held at once.
    pub peak_score_buffer: u64,
}

/// Predicted statistics: `n²` per head for global attention and `n·G`
/// (over the padded length) for shift short attention.
pub fn attention_stats(n: usize, pattern: AttentionPattern, heads: usize) -> Result<AttentionStats> {
    pattern.validate(n)?;
    let (per_head, peak) = match pattern {
        AttentionPattern::Global => ((n * n) as u64, (n * n) as u64),
        AttentionPattern::ShiftShort { group_size: g } => {
            let padded = n.div_ceil(g) * g;
            ((padded * g) as u64, (g * g) as u64)
        }
    };
    Ok(AttentionStats {
        seq_len: n,
        heads,
        score_elements_per_head: per_head,
        score_elements_total: per_head * heads as u64,
        peak_score_buffer: peak,
    })
}

/// Number of heads that keep aligned groups; odd counts favour this half.
pub fn unshifted_heads(heads: usize) -> usize {
    heads - heads / 2
}

/// Token blocks for one head, in group order. Indices `≥ n` are padding.
pub fn head_blocks(n: usize, heads: usize, head: usize, pattern: AttentionPattern) -> Vec<Vec<usize>> {
    match pattern {
        AttentionPattern::Global => vec![(0..n).collect()],
        AttentionPattern::ShiftShort { group_size: g } => {
            let padded = n.div_ceil(g) * g;
            // a single group has no neighbour to exchange with, so no head is rolled
            let shift = if head >= unshifted_heads(heads) && padded > g {
                g / 2
            } else {
                0
            };
            (0..padded / g)
                .map(|j| (0..g).map(|t| (j * g + t + shift) % padded).collect())
                .collect()
        }
    }
}

/// Probabilities saved for the backward pass: per head, per block, a
/// `len × len` matrix (zeros where masked).
pub struct SavedAttention<S> {
    heads: Vec<Vec<(Vec<usize>, Vec<S>)>>,
}

/// Forward pass over `[seq × heads·hd]` projections.
pub(crate) fn forward_kernel<S: Element>(
    q: &[S],
    k: &[S],
    v: &[S],
    n: usize,
    heads: usize,
    hd: usize,
    pattern: AttentionPattern,
) -> Result<(Vec<S>, SavedAttention<S>, AttentionStats)> {
    pattern.validate(n)?;
    let width = heads * hd;
    let scale = S::from_f64(1.0 / (hd as f64).sqrt());
    let mut out = vec![S::zero(); n * width];
    let mut saved = Vec::with_capacity(heads);
    let mut per_head = 0u64;
    let mut peak = 0u64;
    let mut scores: Vec<S> = Vec::new();
    for h in 0..heads {
        let off = h * hd;
        let mut blocks = Vec::new();
        per_head = 0;
        for idx in head_blocks(n, heads, h, pattern) {
            let len = idx.len();
            per_head += (len * len) as u64;
            peak = peak.max((len * len) as u64);
            let mut probs = vec![S::zero(); len * len];
            for a in 0..len {
                let i = idx[a];
                if i >= n {
                    continue;
                }
                let qi = &q[i * width + off..i * width + off + hd];
                scores.clear();
                scores.resize(a + 1, S::neg_infinity());
                for b in 0..=a {
                    let j = idx[b];
                    if j <= i {
                        scores[b] = kernels::dot(qi, &k[j * width + off..j * width + off + hd]) * scale;
                    }
                }
                let row = &mut probs[a * len..a * len + a + 1];
                // the query itself is always visible, so the row is never empty
                kernels::softmax_row(&scores, None, row);
                let o = &mut out[i * width + off..i * width + off + hd];
                for b in 0..=a {
                    let p = row[b];
                    if p != S::zero() {
                        let j = idx[b];
                        kernels::axpy(p, &v[j * width + off..j * width + off + hd], o);
                    }
                }
            }
            blocks.push((idx, probs));
        }
        saved.push(blocks);
    }
    let stats = AttentionStats {
        seq_len: n,
        heads,
        score_elements_per_head: per_head,
        score_elements_total: per_head * heads as u64,
        peak_score_buffer: peak,
    };
    Ok((out, SavedAttention { heads: saved }, stats))
}

/// Gradients with respect to q, k and v given the output gradient `g`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward_kernel<S: Element>(
    q: &[S],
    k: &[S],
    v: &[S],
    g: &[S],
    saved: &SavedAttention<S>,
    n: usize,
    heads: usize,
    hd: usize,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let width = heads * hd;
    let scale = S::from_f64(1.0 / (hd as f64).sqrt());
    let mut dq = vec![S::zero(); n * width];
    let mut dk = vec![S::zero(); n * width];
    let mut dv = vec![S::zero(); n * width];
    let mut dp: Vec<S> = Vec::new();
    for (h, blocks) in saved.heads.iter().enumerate() {
        let off = h * hd;
        for (idx, probs) in blocks {
            let len = idx.len();
            for a in 0..len {
                let i = idx[a];
                if i >= n {
                    continue;
                }
                let row = &probs[a * len..a * len + a + 1];
                let gi = &g[i * width + off..i * width + off + hd];
                dp.clear();
                let mut weighted = S::zero();
                for b in 0..=a {
                    let p = row[b];
                    let d = if p != S::zero() {
                        kernels::dot(gi, &v[idx[b] * width + off..idx[b] * width + off + hd])
                    } else {
                        S::zero()
                    };
                    weighted = weighted + p * d;
                    dp.push(d);
                }
                for b in 0..=a {
                    let p = row[b];
                    if p == S::zero() {
                        continue;
                    }
                    let j = idx[b];
                    let ds = p * (dp[b] - weighted) * scale;
                    let kj = j * width + off;
                    let qi = i * width + off;
                    for t in 0..hd {
                        dq[qi + t] = dq[qi + t] + ds * k[kj + t];
                        dk[kj + t] = dk[kj + t] + ds * q[qi + t];
                        dv[kj + t] = dv[kj + t] + p * gi[t];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

fn split_heads(q: &Tensor) -> Result<(usize, usize, usize)> {
    match q.shape() {
        [s, h, d] => Ok((*s, *h, *d)),
        s => Err(Error::dim(format!("expected [seq × heads × head_dim], got {s:?}"))),
    }
}

fn eager(q: &Tensor, k: &Tensor, v: &Tensor, pattern: AttentionPattern) -> Result<Tensor> {
    let (n, heads, hd) = split_heads(q)?;
    if k.shape() != q.shape() || v.shape() != q.shape() {
        return Err(Error::dim(format!(
            "q {:?}, k {:?}, v {:?} differ",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let (out, _, _) = forward_kernel(q.data(), k.data(), v.data(), n, heads, hd, pattern)?;
    Tensor::new(q.shape().to_vec(), out)
}

/// Per head `softmax(q·kᵀ/√d + causal mask)·v` on `[seq × heads × head_dim]`.
pub fn global_causal_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    eager(q, k, v, AttentionPattern::Global)
}

/// Shift short attention with group size `group_size`.
pub fn shift_short_attention(q: &Tensor, k: &Tensor, v: &Tensor, group_size: usize) -> Result<Tensor> {
    eager(q, k, v, AttentionPattern::ShiftShort { group_size })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn qkv(n: usize, h: usize, d: usize, seed: u64) -> (Tensor, Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (
            Tensor::randn(&[n, h, d], 1.0, &mut rng),
            Tensor::randn(&[n, h, d], 1.0, &mut rng),
            Tensor::randn(&[n, h, d], 1.0, &mut rng),
        )
    }

    #[test]
    fn single_token_returns_v() {
        let (q, k, v) = qkv(1, 2, 4, 0);
        let o = global_causal_attention(&q, &k, &v).unwrap();
        assert_eq!(o.data(), v.data());
    }

    #[test]
    fn uniform_scores_average_prefix() {
        let n = 6;
        let q = Tensor::zeros(&[n, 1, 4]);
        let k = Tensor::zeros(&[n, 1, 4]);
        let (_, _, v) = qkv(n, 1, 4, 3);
        let o = global_causal_attention(&q, &k, &v).unwrap();
        for i in 0..n {
            for t in 0..4 {
                let mean: f32 = (0..=i).map(|j| v.data()[j * 4 + t]).sum::<f32>() / (i + 1) as f32;
                assert!((o.data()[i * 4 + t] - mean).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn matches_naive_loop() {
        let (n, h, d) = (8, 2, 4);
        let (q, k, v) = qkv(n, h, d, 5);
        let o = global_causal_attention(&q, &k, &v).unwrap();
        let at = |t: &Tensor, i: usize, hh: usize, c: usize| t.data()[(i * h + hh) * d + c] as f64;
        for hh in 0..h {
            for i in 0..n {
                let s: Vec<f64> = (0..=i)
                    .map(|j| (0..d).map(|c| at(&q, i, hh, c) * at(&k, j, hh, c)).sum::<f64>() / (d as f64).sqrt())
                    .collect();
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
                for c in 0..d {
                    let want: f64 = (0..=i).map(|j| (s[j] - m).exp() / z * at(&v, j, hh, c)).sum();
                    assert!((o.data()[(i * h + hh) * d + c] as f64 - want).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn single_group_equals_global() {
        let (q, k, v) = qkv(16, 4, 8, 7);
        let a = global_causal_attention(&q, &k, &v).unwrap();
        let b = shift_short_attention(&q, &k, &v, 16).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn config_errors() {
        let (q, k, v) = qkv(8, 2, 4, 1);
        assert!(matches!(shift_short_attention(&q, &k, &v, 3), Err(Error::Config(_))));
        assert!(matches!(shift_short_attention(&q, &k, &v, 0), Err(Error::Config(_))));
        assert!(matches!(shift_short_attention(&q, &k, &v, 10), Err(Error::Config(_))));
        let bad = Tensor::zeros(&[7, 2, 4]);
        assert!(matches!(global_causal_attention(&q, &bad, &v), Err(Error::Dimension(_))));
    }

    #[test]
    fn paper_group_rule_and_counts() {
        let s = attention_stats(8192, AttentionPattern::ShiftShort { group_size: 8192 / 4 }, 32).unwrap();
        let g = attention_stats(8192, AttentionPattern::Global, 32).unwrap();
        assert_eq!(s.score_elements_per_head * 4, g.score_elements_per_head);
        let s = attention_stats(8, AttentionPattern::ShiftShort { group_size: 4 }, 1).unwrap();
        assert_eq!(s.score_elements_per_head, 32);
        assert_eq!(attention_stats(8, AttentionPattern::Global, 1).unwrap().score_elements_per_head, 64);
        let full = attention_stats(8, AttentionPattern::ShiftShort { group_size: 8 }, 3).unwrap();
        assert_eq!(full, attention_stats(8, AttentionPattern::Global, 3).unwrap());
    }

    #[test]
    fn measured_stats_match_prediction() {
        for (n, g) in [(8, 4), (16, 4), (12, 8), (10, 4)] {
            let p = AttentionPattern::ShiftShort { group_size: g };
            let (q, k, v) = qkv(n, 3, 4, 2);
            let (_, _, measured) = forward_kernel(q.data(), k.data(), v.data(), n, 3, 4, p).unwrap();
            assert_eq!(measured, attention_stats(n, p, 3).unwrap());
        }
    }

    #[test]
    fn blocks_for_shifted_head() {
        let p = AttentionPattern::ShiftShort { group_size: 4 };
        assert_eq!(head_blocks(8, 2, 0, p), vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7]]);
        assert_eq!(head_blocks(8, 2, 1, p), vec![vec![2, 3, 4, 5], vec![6, 7, 0, 1]]);
        assert_eq!(unshifted_heads(3), 2);
    }

    #[test]
    fn pattern_parsing() {
        assert_eq!("global".parse::<PatternKind>().unwrap(), PatternKind::Global);
        assert_eq!("shift_short".parse::<PatternKind>().unwrap(), PatternKind::ShiftShort);
        assert!("sparse".parse::<PatternKind>().is_err());
    }
}
