//! Low-rank adapters on top of frozen 4-bit base weights.
//!
//! Every linear projection of the model computes
//! `y = x·Wᵀ + (alpha/r)·(x·Aᵀ)·Bᵀ` where `W` is the dequantized base weight
//! (never updated), `A: [r × d_in]` and `B: [d_out × r]` are the only
//! trainable tensors. `B` starts at zero so a fresh adapter leaves the base
//! output untouched.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizer::{dequantize_tensor, QuantizedTensor};
use crate::tensor::{kernels, Element, Graph, Tensor, Var};

pub const DEFAULT_ALPHA: f32 = 16.0;

/// The seven adapted projections of a decoder layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Projection {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl Projection {
    pub const ALL: [Projection; 7] = [
        Projection::Q,
        Projection::K,
        Projection::V,
        Projection::O,
        Projection::Gate,
        Projection::Up,
        Projection::Down,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Projection::Q => "q_proj",
            Projection::K => "k_proj",
            Projection::V => "v_proj",
            Projection::O => "o_proj",
            Projection::Gate => "gate_proj",
            Projection::Up => "up_proj",
            Projection::Down => "down_proj",
        }
    }

    /// `(d_in, d_out)` for a model of width `d_model` and feed-forward width `d_ff`.
    pub fn dims(self, d_model: usize, d_ff: usize) -> (usize, usize) {
        match self {
            Projection::Q | Projection::K | Projection::V | Projection::O => (d_model, d_model),
            Projection::Gate | Projection::Up => (d_model, d_ff),
            Projection::Down => (d_ff, d_model),
        }
    }
}

impl FromStr for Projection {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Projection::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Format(format!("unknown projection '{s}'")))
    }
}

/// Where an adapter is attached: `layer{i}.{projection}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AdapterTarget {
    pub layer: usize,
    pub projection: Projection,
}

impl fmt::Display for AdapterTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layer{}.{}", self.layer, self.projection.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub target: AdapterTarget,
    a: Tensor,
    b: Tensor,
    rank: usize,
    alpha: f32,
}

/// Fresh adapter: `A ~ N(0, 1/rank)`, `B = 0`.
pub fn init_adapter(d_in: usize, d_out: usize, rank: usize, alpha: f32, seed: u64) -> Result<LoraAdapter> {
    if rank == 0 {
        return Err(Error::config("adapter rank must be at least 1"));
    }
    if rank > d_in.min(d_out) {
        return Err(Error::config(format!(
            "rank {rank} exceeds min(d_in, d_out) = {}",
            d_in.min(d_out)
        )));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::config(format!("alpha must be positive, got {alpha}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = Tensor::randn(&[rank, d_in], 1.0 / (rank as f32).sqrt(), &mut rng).with_requires_grad(true);
    let b = Tensor::zeros(&[d_out, rank]).with_requires_grad(true);
    Ok(LoraAdapter {
        target: AdapterTarget {
            layer: 0,
            projection: Projection::Q,
        },
        a,
        b,
        rank,
        alpha,
    })
}

impl LoraAdapter {
    /// Rebuilds an adapter from stored factors.
    pub fn from_parts(target: AdapterTarget, a: Tensor, b: Tensor, alpha: f32) -> Result<Self> {
        let (rank, _) = a.dims2()?;
        let (_, rb) = b.dims2()?;
        if rank == 0 || rb != rank {
            return Err(Error::dim(format!(
                "A {:?} and B {:?} do not share a rank",
                a.shape(),
                b.shape()
            )));
        }
        Ok(Self {
            target,
            a: a.with_requires_grad(true),
            b: b.with_requires_grad(true),
            rank,
            alpha,
        })
    }

    pub fn with_target(mut self, target: AdapterTarget) -> Self {
        self.target = target;
        self
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f32 {
        self.alpha
    }

    pub fn scaling(&self) -> f32 {
        self.alpha / self.rank as f32
    }

    pub fn d_in(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.b.shape()[0]
    }

    pub fn a(&self) -> &Tensor {
        &self.a
    }

    pub fn b(&self) -> &Tensor {
        &self.b
    }

    pub fn a_mut(&mut self) -> &mut Tensor {
        &mut self.a
    }

    pub fn b_mut(&mut self) -> &mut Tensor {
        &mut self.b
    }

    pub fn factors_mut(&mut self) -> (&mut Tensor, &mut Tensor) {
        (&mut self.a, &mut self.b)
    }

    pub fn param_count(&self) -> usize {
        self.rank * (self.d_in() + self.d_out())
    }

    /// Implied weight update `scaling · B · A`, shape `[d_out × d_in]`.
    pub fn delta(&self) -> Tensor {
        let (r, d_in) = (self.rank, self.d_in());
        let d_out = self.d_out();
        let mut w = kernels::matmul(self.b.data(), self.a.data(), d_out, r, d_in);
        let s = self.scaling();
        w.iter_mut().for_each(|v| *v *= s);
        Tensor::new(vec![d_out, d_in], w).expect("delta shape")
    }
}

/// Adapter factors registered on a graph.
#[derive(Debug, Clone, Copy)]
pub struct AdapterVars {
    pub a: Var,
    pub b: Var,
    pub scaling: f64,
}

/// `x·Wᵀ (+ scaling·(x·Aᵀ)·Bᵀ)` on a graph.
pub fn linear<S: Element>(g: &mut Graph<S>, x: Var, weight: Var, adapter: Option<AdapterVars>) -> Result<Var> {
    let base = g.matmul_nt(x, weight)?;
    match adapter {
        None => Ok(base),
        Some(ad) => {
            let down = g.matmul_nt(x, ad.a)?;
            let up = g.matmul_nt(down, ad.b)?;
            let scaled = g.scale(up, S::from_f64(ad.scaling));
            g.add(base, scaled)
        }
    }
}

fn check_shapes(x: &Tensor, base: &QuantizedTensor, adapter: &LoraAdapter) -> Result<(usize, usize)> {
    let (_, d_in) = x.dims2()?;
    let (d_out, w_in) = match base.shape() {
        [o, i] => (*o, *i),
        s => return Err(Error::dim(format!("base weight must be 2-D, got {s:?}"))),
    };
    if w_in != d_in || adapter.d_in() != d_in || adapter.d_out() != d_out {
        return Err(Error::dim(format!(
            "x width {d_in}, base {d_out}×{w_in}, adapter {}×{}",
            adapter.d_out(),
            adapter.d_in()
        )));
    }
    Ok((d_in, d_out))
}

/// `y = x·dequantize(base)ᵀ + scaling·(x·Aᵀ)·Bᵀ` for row inputs `x: [n × d_in]`.
pub fn adapted_forward(x: &Tensor, base: &QuantizedTensor, adapter: &LoraAdapter) -> Result<Tensor> {
    check_shapes(x, base, adapter)?;
    let w = dequantize_tensor(base)?;
    let mut g = Graph::<f32>::new();
    let xv = g.constant(x);
    let wv = g.constant(&w);
    let ad = AdapterVars {
        a: g.constant(&adapter.a),
        b: g.constant(&adapter.b),
        scaling: adapter.scaling() as f64,
    };
    let y = linear(&mut g, xv, wv, Some(ad))?;
    Ok(g.to_tensor(y))
}

/// Full-precision `dequantize(base) + scaling·B·A`.
pub fn merge_adapter(base: &QuantizedTensor, adapter: &LoraAdapter) -> Result<Tensor> {
    let (o, i) = match base.shape() {
        [o, i] => (*o, *i),
        s => return Err(Error::dim(format!("base weight must be 2-D, got {s:?}"))),
    };
    if adapter.d_in() != i || adapter.d_out() != o {
        return Err(Error::dim(format!(
            "adapter {}×{} does not fit base {o}×{i}",
            adapter.d_out(),
            adapter.d_in()
        )));
    }
    let mut w = dequantize_tensor(base)?;
    let d = adapter.delta();
    for (w, d) in w.data_mut().iter_mut().zip(d.data()) {
        *w += d;
    }
    Ok(w)
}

/// Trainable parameters of a model: `Σ r·(d_in + d_out)` over the seven
/// projections of every layer. Embeddings, norms and base weights are frozen.
pub fn trainable_param_count(d_model: usize, d_ff: usize, n_layers: usize, rank: usize) -> usize {
    let per_layer: usize = Projection::ALL
        .iter()
        .map(|p| {
            let (i, o) = p.dims(d_model, d_ff);
            rank * (i + o)
        })
        .sum();
    per_layer * n_layers
}
