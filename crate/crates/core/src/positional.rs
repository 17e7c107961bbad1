//! Rotary position embeddings with position interpolation.
//!
//! A model pretrained on `pretrained_ctx` positions is extended to
//! `target_ctx` by multiplying every position index by
//! `scale = pretrained_ctx / target_ctx`. Rotation angles therefore never
//! leave the range seen in pretraining; fractional effective positions are
//! used as-is.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_ROPE_BASE: f64 = 10_000.0;

/// Precomputed cos/sin of the rotation angles for positions `0..max_pos`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RopeTable {
    head_dim: usize,
    base: f64,
    scale: f64,
    max_pos: usize,
    cos: Vec<f32>,
    sin: Vec<f32>,
}

/// Builds the rotation table for a model extended from `pretrained_ctx` to
/// `target_ctx`.
pub fn build_rope_table(
    head_dim: usize,
    base: f64,
    pretrained_ctx: usize,
    target_ctx: usize,
    max_pos: usize,
) -> Result<RopeTable> {
    if head_dim == 0 || head_dim % 2 != 0 {
        return Err(Error::config(format!("head_dim must be even and positive, got {head_dim}")));
    }
    if pretrained_ctx == 0 || target_ctx == 0 {
        return Err(Error::config("context lengths must be positive"));
    }
    if target_ctx < pretrained_ctx {
        return Err(Error::config(format!(
            "target context {target_ctx} is shorter than the pretrained {pretrained_ctx}"
        )));
    }
    if max_pos > target_ctx {
        return Err(Error::config(format!(
            "table of {max_pos} positions exceeds the target context {target_ctx}"
        )));
    }
    if !(base > 1.0) || !base.is_finite() {
        return Err(Error::config(format!("rope base must exceed 1, got {base}")));
    }
    let scale = pretrained_ctx as f64 / target_ctx as f64;
    RopeTable::with_scale(head_dim, base, scale, max_pos)
}

impl RopeTable {
    /// Table with an explicit interpolation scale in `(0, 1]`.
    pub fn with_scale(head_dim: usize, base: f64, scale: f64, max_pos: usize) -> Result<Self> {
        if head_dim == 0 || head_dim % 2 != 0 {
            return Err(Error::config(format!("head_dim must be even and positive, got {head_dim}")));
        }
        if !(scale > 0.0 && scale <= 1.0) {
            return Err(Error::config(format!("scale must lie in (0, 1], got {scale}")));
        }
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(max_pos * half);
        let mut sin = Vec::with_capacity(max_pos * half);
        let mut t = Self {
            head_dim,
            base,
            scale,
            max_pos,
            cos: Vec::new(),
            sin: Vec::new(),
        };
        for m in 0..max_pos {
            let eff = t.effective_position(m);
            for i in 0..half {
                let a = t.angle_at(eff, i);
                cos.push(a.cos() as f32);
                sin.push(a.sin() as f32);
            }
        }
        t.cos = cos;
        t.sin = sin;
        Ok(t)
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn max_pos(&self) -> usize {
        self.max_pos
    }

    /// Position index after interpolation, `m · scale`.
    pub fn effective_position(&self, m: usize) -> f64 {
        m as f64 * self.scale
    }

    /// Frequency of pair `i`: `base^(−2i/head_dim)`.
    pub fn inv_freq(&self, i: usize) -> f64 {
        self.base.powf(-2.0 * i as f64 / self.head_dim as f64)
    }

    /// Rotation angle of pair `i` at an effective (possibly fractional) position.
    pub fn angle_at(&self, effective_pos: f64, i: usize) -> f64 {
        effective_pos * self.inv_freq(i)
    }

    /// Angles of every pair at raw position index `m`.
    pub fn angles(&self, m: usize) -> Vec<f64> {
        let eff = self.effective_position(m);
        (0..self.head_dim / 2).map(|i| self.angle_at(eff, i)).collect()
    }

    /// `(cos, sin)` rows for position `m`.
    pub fn row(&self, m: usize) -> Result<(&[f32], &[f32])> {
        if m >= self.max_pos {
            return Err(Error::Index(format!(
                "position {m} outside the table of {} positions",
                self.max_pos
            )));
        }
        let half = self.head_dim / 2;
        Ok((
            &self.cos[m * half..(m + 1) * half],
            &self.sin[m * half..(m + 1) * half],
        ))
    }
}

/// Rotates every `(x[2i], x[2i+1])` pair of `x: [seq × heads × head_dim]` by
/// the table angle of its position.
pub fn apply_rope(x: &Tensor, positions: &[usize], table: &RopeTable) -> Result<Tensor> {
    rotate(x, positions, table, false)
}

/// Undoes [`apply_rope`].
pub fn invert_rope(x: &Tensor, positions: &[usize], table: &RopeTable) -> Result<Tensor> {
    rotate(x, positions, table, true)
}

fn rotate(x: &Tensor, positions: &[usize], table: &RopeTable, inverse: bool) -> Result<Tensor> {
    let (seq, width) = match x.shape() {
        [s, h, d] if *d == table.head_dim => (*s, h * d),
        [s, w] if w % table.head_dim == 0 => (*s, *w),
        s => {
            return Err(Error::dim(format!(
                "expected [seq × heads × {}], got {s:?}",
                table.head_dim
            )))
        }
    };
    if positions.len() != seq {
        return Err(Error::dim(format!("{} positions for {seq} rows", positions.len())));
    }
    let half = table.head_dim / 2;
    let mut cos = Vec::with_capacity(seq * half);
    let mut sin = Vec::with_capacity(seq * half);
    for &p in positions {
        let (c, s) = table.row(p)?;
        cos.extend_from_slice(c);
        sin.extend_from_slice(s);
    }
    let out = crate::tensor::graph::rotate_pairs(
        x.data(),
        &cos,
        &sin,
        seq,
        width,
        table.head_dim,
        inverse,
    );
    Tensor::new(x.shape().to_vec(), out)
}

/// Whether the rotation at raw position `m` under `scaled` equals the
/// rotation of `unscaled` (scale 1) at the effective position `m · s`,
/// elementwise within 1e-6.
pub fn interpolation_equivalence_check(m: usize, scaled: &RopeTable, unscaled: &RopeTable) -> bool {
    if unscaled.scale != 1.0
        || scaled.head_dim != unscaled.head_dim
        || scaled.base != unscaled.base
    {
        return false;
    }
    let eff = scaled.effective_position(m);
    (0..scaled.head_dim / 2).all(|i| {
        let a = scaled.angle_at(eff, i);
        let b = unscaled.angle_at(eff * unscaled.scale, i);
        (a.cos() - b.cos()).abs() <= 1e-6 && (a.sin() - b.sin()).abs() <= 1e-6
    })
}
