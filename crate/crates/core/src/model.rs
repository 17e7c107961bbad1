//! Decoder-only transformer over a frozen 4-bit base with low-rank adapters.
//!
//! Block layout (pre-norm):
//!
//! ```text
//! x ─ rms_norm ─ q,k,v ─ rope(q,k) ─ attention ─ o ─(+x)─ rms_norm ─ down(silu(gate)·up) ─(+)
//! ```
//!
//! All seven projections of every layer carry an adapter. Base projection
//! weights, embeddings and the output head keep a full-precision copy and an
//! NF4 copy; which one a forward pass reads is chosen by [`WeightPrecision`].
//! Norm weights, embeddings and base weights never change after
//! construction.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionPattern, PatternKind};
use crate::error::{Error, Result};
use crate::lora::{self, init_adapter, AdapterTarget, AdapterVars, LoraAdapter, Projection};
use crate::positional::{build_rope_table, RopeTable, DEFAULT_ROPE_BASE};
use crate::quantizer::{dequantize_tensor, quantize_tensor_with, QuantizedTensor};
use crate::tensor::graph::row_nll;
use crate::tensor::{Element, Graph, Tensor, Var};

/// Seed offset for adapter initialization; adapter `i` uses `seed + ADAPTER_SEED_OFFSET + i`.
pub const ADAPTER_SEED_OFFSET: u64 = 1_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub pretrained_ctx: usize,
    pub target_ctx: usize,
    pub rope_base: f64,
    /// Attention used while finetuning.
    pub train_attention: PatternKind,
    /// Shift short group size; `target_ctx / 4` when unset.
    pub group_size: Option<usize>,
    pub lora_rank: usize,
    pub lora_alpha: f32,
    pub quant_block_size: usize,
    pub double_quant: bool,
    pub quant_superblock: usize,
    /// Also keep NF4 copies of the embedding table and output head.
    pub quantize_embeddings: bool,
    pub tie_embeddings: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// The byte-level toy configuration.
    fn default() -> Self {
        Self {
            vocab_size: crate::data::VOCAB_SIZE,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 172,
            pretrained_ctx: 64,
            target_ctx: 128,
            rope_base: DEFAULT_ROPE_BASE,
            train_attention: PatternKind::ShiftShort,
            group_size: None,
            lora_rank: 8,
            lora_alpha: lora::DEFAULT_ALPHA,
            quant_block_size: crate::quantizer::DEFAULT_BLOCK_SIZE,
            double_quant: true,
            quant_superblock: crate::quantizer::DEFAULT_SUPERBLOCK,
            quantize_embeddings: true,
            tie_embeddings: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Group size for shift short attention: explicit, or a quarter of the target context.
    pub fn group_size(&self) -> usize {
        self.group_size.unwrap_or(self.target_ctx / 4)
    }

    pub fn pattern(&self, kind: PatternKind) -> AttentionPattern {
        match kind {
            PatternKind::Global => AttentionPattern::Global,
            PatternKind::ShiftShort => AttentionPattern::ShiftShort {
                group_size: self.group_size(),
            },
        }
    }

    /// Pattern used during finetuning.
    pub fn train_pattern(&self) -> AttentionPattern {
        self.pattern(self.train_attention)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("d_ff", self.d_ff),
            ("pretrained_ctx", self.pretrained_ctx),
            ("target_ctx", self.target_ctx),
            ("quant_block_size", self.quant_block_size),
            ("quant_superblock", self.quant_superblock),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::config(format!("head_dim {} must be even", self.head_dim())));
        }
        if self.target_ctx < self.pretrained_ctx {
            return Err(Error::config("target_ctx must be at least pretrained_ctx"));
        }
        if self.lora_rank == 0 || self.lora_rank > self.d_model.min(self.d_ff) {
            return Err(Error::config(format!(
                "lora_rank {} must lie in 1..={}",
                self.lora_rank,
                self.d_model.min(self.d_ff)
            )));
        }
        if !(self.lora_alpha > 0.0) {
            return Err(Error::config("lora_alpha must be positive"));
        }
        if self.train_attention == PatternKind::ShiftShort {
            let g = self.group_size();
            if g < 2 || g % 2 != 0 || g > self.target_ctx {
                return Err(Error::config(format!(
                    "group size {g} must be even, ≥ 2 and at most target_ctx"
                )));
            }
        }
        Ok(())
    }

    /// `key=value` pairs in a fixed order.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut v = vec![
            ("vocab_size", self.vocab_size.to_string()),
            ("d_model", self.d_model.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("n_layers", self.n_layers.to_string()),
            ("d_ff", self.d_ff.to_string()),
            ("pretrained_ctx", self.pretrained_ctx.to_string()),
            ("target_ctx", self.target_ctx.to_string()),
            ("rope_base", self.rope_base.to_string()),
            ("attention", self.train_attention.to_string()),
            ("lora_rank", self.lora_rank.to_string()),
            ("lora_alpha", self.lora_alpha.to_string()),
            ("quant_block_size", self.quant_block_size.to_string()),
            ("double_quant", self.double_quant.to_string()),
            ("quant_superblock", self.quant_superblock.to_string()),
            ("quantize_embeddings", self.quantize_embeddings.to_string()),
            ("tie_embeddings", self.tie_embeddings.to_string()),
            ("seed", self.seed.to_string()),
        ];
        if let Some(g) = self.group_size {
            v.push(("group_size", g.to_string()));
        }
        v.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// Applies known keys from `kv`; unknown keys are left for other consumers.
    pub fn apply_kv(&mut self, kv: &BTreeMap<String, String>) -> Result<()> {
        fn parse<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| Error::config(format!("cannot parse {k}={v}")))
        }
        for (k, v) in kv {
            match k.as_str() {
                "vocab_size" => self.vocab_size = parse(k, v)?,
                "d_model" => self.d_model = parse(k, v)?,
                "n_heads" => self.n_heads = parse(k, v)?,
                "n_layers" => self.n_layers = parse(k, v)?,
                "d_ff" => self.d_ff = parse(k, v)?,
                "pretrained_ctx" => self.pretrained_ctx = parse(k, v)?,
                "target_ctx" => self.target_ctx = parse(k, v)?,
                "rope_base" => self.rope_base = parse(k, v)?,
                "attention" => self.train_attention = v.trim().parse()?,
                "group_size" => self.group_size = Some(parse(k, v)?),
                "lora_rank" => self.lora_rank = parse(k, v)?,
                "lora_alpha" => self.lora_alpha = parse(k, v)?,
                "quant_block_size" => self.quant_block_size = parse(k, v)?,
                "double_quant" => self.double_quant = parse(k, v)?,
                "quant_superblock" => self.quant_superblock = parse(k, v)?,
                "quantize_embeddings" => self.quantize_embeddings = parse(k, v)?,
                "tie_embeddings" => self.tie_embeddings = parse(k, v)?,
                "seed" => self.seed = parse(k, v)?,
                _ => {}
            }
        }
        Ok(())
    }
}

/// Per-token flag: `true` when the token is a prediction target of the loss.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossMask(pub Vec<bool>);

impl LossMask {
    pub fn full(len: usize) -> Self {
        Self(vec![true; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&m| m).count()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }
}

/// Which copy of the frozen weights a forward pass reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightPrecision {
    Full,
    Nf4,
}

/// A frozen matrix kept in full precision and, optionally, as NF4 codes.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenMatrix {
    full: Tensor,
    quantized: Option<QuantizedTensor>,
    dequantized: Option<Tensor>,
}

impl FrozenMatrix {
    pub fn new(full: Tensor, quantized: Option<QuantizedTensor>) -> Result<Self> {
        let dequantized = match &quantized {
            Some(q) => {
                if q.shape() != full.shape() {
                    return Err(Error::dim(format!(
                        "quantized shape {:?} differs from {:?}",
                        q.shape(),
                        full.shape()
                    )));
                }
                Some(dequantize_tensor(q)?)
            }
            None => None,
        };
        Ok(Self {
            full: full.with_requires_grad(false),
            quantized,
            dequantized,
        })
    }

    fn quantize(full: Tensor, cfg: &ModelConfig) -> Result<Self> {
        let q = quantize_tensor_with(&full, cfg.quant_block_size, cfg.double_quant, cfg.quant_superblock)?;
        Self::new(full, Some(q))
    }

    pub fn full(&self) -> &Tensor {
        &self.full
    }

    pub fn quantized(&self) -> Option<&QuantizedTensor> {
        self.quantized.as_ref()
    }

    /// Weight as read under `precision`; falls back to full precision when
    /// no NF4 copy exists.
    pub fn weight(&self, precision: WeightPrecision) -> &Tensor {
        match (precision, &self.dequantized) {
            (WeightPrecision::Nf4, Some(d)) => d,
            _ => &self.full,
        }
    }
}

/// One adapted projection.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedProjection {
    pub base: FrozenMatrix,
    pub adapter: LoraAdapter,
    merged: Option<(WeightPrecision, Tensor)>,
}

impl AdaptedProjection {
    pub fn new(base: FrozenMatrix, adapter: LoraAdapter) -> Result<Self> {
        if base.full().shape() != [adapter.d_out(), adapter.d_in()] {
            return Err(Error::dim(format!(
                "adapter {}×{} does not fit base {:?}",
                adapter.d_out(),
                adapter.d_in(),
                base.full().shape()
            )));
        }
        Ok(Self {
            base,
            adapter,
            merged: None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub attn_norm: Tensor,
    pub ffn_norm: Tensor,
    /// Indexed in [`Projection::ALL`] order.
    pub projections: Vec<AdaptedProjection>,
}

impl Layer {
    pub fn projection(&self, p: Projection) -> &AdaptedProjection {
        &self.projections[p as usize]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    rope: RopeTable,
    pub embedding: FrozenMatrix,
    pub layers: Vec<Layer>,
    pub final_norm: Tensor,
    /// `None` when the head is tied to the embedding table.
    pub head: Option<FrozenMatrix>,
    merged: bool,
}

/// Graph handles of the trainable tensors of one forward pass, in
/// [`Model::adapters`] order.
pub struct ForwardPass {
    pub logits: Var,
    pub adapter_vars: Vec<AdapterVars>,
}

/// Builds the model from its seed: Gaussian base weights, unit norm
/// weights, NF4 copies of the frozen matrices and zero-initialized adapters
/// on all seven projections of every layer.
pub fn build_model(config: &ModelConfig) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.d_model;
    let embed = Tensor::randn(&[config.vocab_size, d], 1.0, &mut rng);
    let embedding = if config.quantize_embeddings {
        FrozenMatrix::quantize(embed, config)?
    } else {
        FrozenMatrix::new(embed, None)?
    };
    let mut layers = Vec::with_capacity(config.n_layers);
    let mut adapter_index = 0u64;
    for layer in 0..config.n_layers {
        let mut projections = Vec::with_capacity(7);
        for p in Projection::ALL {
            let (d_in, d_out) = p.dims(d, config.d_ff);
            let w = Tensor::randn(&[d_out, d_in], 1.0 / (d_in as f32).sqrt(), &mut rng);
            let adapter = init_adapter(
                d_in,
                d_out,
                config.lora_rank,
                config.lora_alpha,
                config.seed + ADAPTER_SEED_OFFSET + adapter_index,
            )?
            .with_target(AdapterTarget { layer, projection: p });
            adapter_index += 1;
            projections.push(AdaptedProjection::new(FrozenMatrix::quantize(w, config)?, adapter)?);
        }
        layers.push(Layer {
            attn_norm: Tensor::new(vec![d], vec![1.0; d])?,
            ffn_norm: Tensor::new(vec![d], vec![1.0; d])?,
            projections,
        });
    }
    let head = if config.tie_embeddings {
        None
    } else {
        let w = Tensor::randn(&[config.vocab_size, d], 1.0 / (d as f32).sqrt(), &mut rng);
        Some(if config.quantize_embeddings {
            FrozenMatrix::quantize(w, config)?
        } else {
            FrozenMatrix::new(w, None)?
        })
    };
    Model::from_parts(
        config.clone(),
        embedding,
        layers,
        Tensor::new(vec![d], vec![1.0; d])?,
        head,
    )
}

impl Model {
    pub fn from_parts(
        config: ModelConfig,
        embedding: FrozenMatrix,
        layers: Vec<Layer>,
        final_norm: Tensor,
        head: Option<FrozenMatrix>,
    ) -> Result<Self> {
        config.validate()?;
        if layers.len() != config.n_layers || layers.iter().any(|l| l.projections.len() != 7) {
            return Err(Error::config("layer count or projection count does not match the config"));
        }
        if head.is_none() != config.tie_embeddings {
            return Err(Error::config("output head presence disagrees with tie_embeddings"));
        }
        let rope = build_rope_table(
            config.head_dim(),
            config.rope_base,
            config.pretrained_ctx,
            config.target_ctx,
            config.target_ctx,
        )?;
        Ok(Self {
            config,
            rope,
            embedding,
            layers,
            final_norm: final_norm.with_requires_grad(false),
            head,
            merged: false,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn rope(&self) -> &RopeTable {
        &self.rope
    }

    pub fn is_merged(&self) -> bool {
        self.merged
    }

    pub fn adapters(&self) -> impl Iterator<Item = &LoraAdapter> {
        self.layers
            .iter()
            .flat_map(|l| l.projections.iter().map(|p| &p.adapter))
    }

    pub fn adapters_mut(&mut self) -> impl Iterator<Item = &mut LoraAdapter> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.projections.iter_mut().map(|p| &mut p.adapter))
    }

    pub fn trainable_param_count(&self) -> usize {
        self.adapters().map(|a| a.param_count()).sum()
    }

    /// Every frozen tensor, serialized in a fixed order. Two models share
    /// frozen state iff these bytes are equal.
    pub fn frozen_state_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let mut push_f32 = |t: &Tensor, out: &mut Vec<u8>| {
            t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()))
        };
        let push_frozen = |m: &FrozenMatrix, out: &mut Vec<u8>, f: &mut dyn FnMut(&Tensor, &mut Vec<u8>)| {
            f(&m.full, out);
            if let Some(q) = &m.quantized {
                q.write_section(out);
            }
        };
        push_frozen(&self.embedding, &mut out, &mut push_f32);
        for l in &self.layers {
            push_f32(&l.attn_norm, &mut out);
            push_f32(&l.ffn_norm, &mut out);
            for p in &l.projections {
                push_frozen(&p.base, &mut out, &mut push_f32);
            }
        }
        push_f32(&self.final_norm, &mut out);
        if let Some(h) = &self.head {
            push_frozen(h, &mut out, &mut push_f32);
        }
        out
    }

    /// Folds every adapter into a full-precision weight for inference.
    /// A model can be merged once; further training or merging is refused.
    pub fn merge_adapters(&mut self, precision: WeightPrecision) -> Result<()> {
        if self.merged {
            return Err(Error::State("adapters are already merged".into()));
        }
        for l in &mut self.layers {
            for p in &mut l.projections {
                let mut w = p.base.weight(precision).clone();
                let delta = p.adapter.delta();
                w.data_mut().iter_mut().zip(delta.data()).for_each(|(w, d)| *w += d);
                p.merged = Some((precision, w));
            }
        }
        self.merged = true;
        Ok(())
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<Vec<usize>> {
        if tokens.is_empty() {
            return Err(Error::Contract("empty token sequence".into()));
        }
        if tokens.len() > self.config.target_ctx {
            return Err(Error::Length {
                len: tokens.len(),
                limit: self.config.target_ctx,
            });
        }
        tokens
            .iter()
            .map(|&t| {
                if (t as usize) < self.config.vocab_size {
                    Ok(t as usize)
                } else {
                    Err(Error::Index(format!(
                        "token {t} ≥ vocab {}",
                        self.config.vocab_size
                    )))
                }
            })
            .collect()
    }

    /// Records the forward pass on `g`. Adapter factors become differentiable
    /// leaves when `trainable` is set; everything else is constant.
    pub fn forward_graph<S: Element>(
        &self,
        g: &mut Graph<S>,
        tokens: &[u32],
        pattern: AttentionPattern,
        precision: WeightPrecision,
        trainable: bool,
    ) -> Result<ForwardPass> {
        if trainable && self.merged {
            return Err(Error::State("cannot train a merged model".into()));
        }
        let ids = self.check_tokens(tokens)?;
        pattern.validate(ids.len())?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let heads = self.config.n_heads;
        let emb = g.constant(self.embedding.weight(precision));
        let mut x = g.embedding(emb, &ids)?;
        let mut adapter_vars = Vec::with_capacity(self.layers.len() * 7);
        for layer in &self.layers {
            let mut proj = |g: &mut Graph<S>, input: Var, p: Projection| -> Result<Var> {
                let ap = layer.projection(p);
                if let Some((_, w)) = &ap.merged {
                    let wv = g.constant(w);
                    return lora::linear(g, input, wv, None);
                }
                let wv = g.constant(ap.base.weight(precision));
                let (a, b) = if trainable {
                    (g.param(ap.adapter.a()), g.param(ap.adapter.b()))
                } else {
                    (g.constant(ap.adapter.a()), g.constant(ap.adapter.b()))
                };
                let vars = AdapterVars {
                    a,
                    b,
                    scaling: ap.adapter.scaling() as f64,
                };
                adapter_vars.push(vars);
                lora::linear(g, input, wv, Some(vars))
            };
            let nw = g.constant(&layer.attn_norm);
            let h = g.rms_norm(x, nw)?;
            let q = proj(g, h, Projection::Q)?;
            let k = proj(g, h, Projection::K)?;
            let v = proj(g, h, Projection::V)?;
            let q = g.rope(q, &self.rope, &positions)?;
            let k = g.rope(k, &self.rope, &positions)?;
            let att = g.attention(q, k, v, heads, pattern)?;
            let o = proj(g, att, Projection::O)?;
            x = g.add(x, o)?;
            let nw = g.constant(&layer.ffn_norm);
            let h = g.rms_norm(x, nw)?;
            let gate = proj(g, h, Projection::Gate)?;
            let up = proj(g, h, Projection::Up)?;
            let act = g.silu(gate);
            let inner = g.mul(act, up)?;
            let down = proj(g, inner, Projection::Down)?;
            x = g.add(x, down)?;
        }
        let nw = g.constant(&self.final_norm);
        let h = g.rms_norm(x, nw)?;
        let head = match &self.head {
            Some(m) => m.weight(precision),
            None => self.embedding.weight(precision),
        };
        let hv = g.constant(head);
        let logits = g.matmul_nt(h, hv)?;
        Ok(ForwardPass { logits, adapter_vars })
    }

    /// Next-token logits `[seq × vocab]` under `pattern` and `precision`.
    pub fn forward_with(&self, tokens: &[u32], pattern: AttentionPattern, precision: WeightPrecision) -> Result<Tensor> {
        let mut g = Graph::<f32>::new();
        let fp = self.forward_graph(&mut g, tokens, pattern, precision, false)?;
        Ok(g.to_tensor(fp.logits))
    }

    /// Next-token logits from the quantized base, the training configuration.
    pub fn forward(&self, tokens: &[u32], pattern: AttentionPattern) -> Result<Tensor> {
        self.forward_with(tokens, pattern, WeightPrecision::Nf4)
    }

    /// Mean loss of predicting `tokens[t+1]` from `tokens[..=t]` wherever
    /// `mask[t+1]` holds; adds the adapter gradients into the adapters'
    /// buffers and returns the loss.
    pub fn accumulate_gradients(
        &mut self,
        tokens: &[u32],
        mask: &LossMask,
        pattern: AttentionPattern,
        grad_scale: f32,
    ) -> Result<f64> {
        let (loss, grads) = self.loss_and_grads::<f32>(tokens, mask, pattern, WeightPrecision::Nf4)?;
        for (ad, (ga, gb)) in self.adapters_mut().zip(grads) {
            let ga: Vec<f32> = ga.iter().map(|v| v * grad_scale).collect();
            let gb: Vec<f32> = gb.iter().map(|v| v * grad_scale).collect();
            ad.a_mut().accumulate_grad(&ga)?;
            ad.b_mut().accumulate_grad(&gb)?;
        }
        Ok(loss)
    }

    /// Loss and per-adapter `(dA, dB)` in working precision `S`.
    pub fn loss_and_grads<S: Element>(
        &self,
        tokens: &[u32],
        mask: &LossMask,
        pattern: AttentionPattern,
        precision: WeightPrecision,
    ) -> Result<(f64, Vec<(Vec<f32>, Vec<f32>)>)> {
        if tokens.len() < 2 {
            return Err(Error::Contract("need at least two tokens to form a prediction".into()));
        }
        if mask.len() != tokens.len() {
            return Err(Error::dim(format!(
                "mask of {} for {} tokens",
                mask.len(),
                tokens.len()
            )));
        }
        let mut g = Graph::<S>::new();
        let fp = self.forward_graph(&mut g, tokens, pattern, precision, true)?;
        // the last row has no next token and is masked out
        let mut targets: Vec<usize> = tokens[1..].iter().map(|&t| t as usize).collect();
        targets.push(0);
        let mut pred_mask = mask.as_slice()[1..].to_vec();
        pred_mask.push(false);
        let loss = g.cross_entropy(fp.logits, &targets, &pred_mask)?;
        let loss_value = g.value(loss)[0].as_f64();
        if !loss_value.is_finite() {
            return Err(Error::Numeric(format!("loss is {loss_value}")));
        }
        let grads = g.backward(loss)?;
        let out = fp
            .adapter_vars
            .iter()
            .map(|av| {
                let conv = |v: Var| -> Vec<f32> {
                    grads
                        .get(v)
                        .map(|g| g.iter().map(|x| x.as_f32()).collect())
                        .unwrap_or_else(|| vec![0.0; g.value(v).len()])
                };
                (conv(av.a), conv(av.b))
            })
            .collect();
        Ok((loss_value, out))
    }

    /// Loss only, computed in working precision `S`, with no gradient work.
    pub fn loss<S: Element>(
        &self,
        tokens: &[u32],
        mask: &LossMask,
        pattern: AttentionPattern,
        precision: WeightPrecision,
    ) -> Result<f64> {
        if mask.len() != tokens.len() || tokens.len() < 2 {
            return Err(Error::Contract("mask must cover at least two tokens".into()));
        }
        let mut g = Graph::<S>::new();
        let fp = self.forward_graph(&mut g, tokens, pattern, precision, false)?;
        let vocab = self.config.vocab_size;
        let logits = g.value(fp.logits);
        let m = &mask.as_slice()[1..];
        let count = m.iter().filter(|&&b| b).count();
        if count == 0 {
            return Err(Error::Contract("every position is masked out of the loss".into()));
        }
        let mut total = 0.0;
        for (t, &keep) in m.iter().enumerate() {
            if keep {
                total += row_nll(&logits[t * vocab..(t + 1) * vocab], tokens[t + 1] as usize);
            }
        }
        Ok(total / count as f64)
    }
}

/// Mean negative log-likelihood of `targets` over rows where `mask` is true.
pub fn masked_cross_entropy(logits: &Tensor, targets: &[u32], mask: &LossMask) -> Result<f64> {
    let (rows, vocab) = logits.dims2()?;
    if targets.len() != rows || mask.len() != rows {
        return Err(Error::dim(format!(
            "{} targets / {} mask entries for {rows} rows",
            targets.len(),
            mask.len()
        )));
    }
    let count = mask.count();
    if count == 0 {
        return Err(Error::Contract("every position is masked out of the loss".into()));
    }
    let mut total = 0.0;
    for r in 0..rows {
        if mask.0[r] {
            let t = targets[r] as usize;
            if t >= vocab {
                return Err(Error::Index(format!("target {t} ≥ vocab {vocab}")));
            }
            total += row_nll(&logits.data()[r * vocab..(r + 1) * vocab], t);
        }
    }
    Ok(total / count as f64)
}
