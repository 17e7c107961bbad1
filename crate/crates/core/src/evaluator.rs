//! Sliding-window perplexity and the rank, step and attention ablations.
//!
//! The corpus is cut into consecutive windows of `ctx_len` tokens (stride
//! equals the window). Each window is scored on its own: position `t`
//! predicts token `t + 1`, so a window of `L` tokens contributes `L − 1`
//! predictions. A final partial window is kept when it holds at least two
//! tokens. NLL is pooled over all predicted tokens.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionPattern, PatternKind};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::{build_model, Model, ModelConfig, WeightPrecision};
use crate::tensor::graph::row_nll;
use crate::tensor::Tensor;
use crate::trainer::{train_loop, TrainConfig};

/// Anything that maps a token window to next-token logits.
pub trait LogitModel {
    fn vocab_size(&self) -> usize;
    fn max_context(&self) -> usize;
    fn logits(&self, tokens: &[u32], pattern: AttentionPattern, precision: WeightPrecision) -> Result<Tensor>;
}

impl LogitModel for Model {
    fn vocab_size(&self) -> usize {
        self.config().vocab_size
    }

    fn max_context(&self) -> usize {
        self.config().target_ctx
    }

    fn logits(&self, tokens: &[u32], pattern: AttentionPattern, precision: WeightPrecision) -> Result<Tensor> {
        self.forward_with(tokens, pattern, precision)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerplexityEntry {
    pub ctx_len: usize,
    pub windows: usize,
    pub tokens: usize,
    pub nll: f64,
    pub ppl: f64,
    pub quantized: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerplexityReport {
    pub model: String,
    pub pattern: String,
    pub entries: Vec<PerplexityEntry>,
    /// Resolved run configuration the report was produced with.
    #[serde(default)]
    pub config: BTreeMap<String, String>,
}

impl PerplexityReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = config_comment(&self.config);
        let _ = writeln!(s, "# model={} pattern={}", self.model, self.pattern);
        s.push_str("ctx_len\twindows\ttokens\tnll\tppl\tquantized\n");
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}",
                e.ctx_len, e.windows, e.tokens, e.nll, e.ppl, e.quantized
            );
        }
        s
    }
}

fn config_comment(config: &BTreeMap<String, String>) -> String {
    config.iter().map(|(k, v)| format!("# {k}={v}\n")).collect()
}

/// Window boundaries for a corpus of `len` tokens.
pub fn window_plan(len: usize, ctx_len: usize) -> Vec<Range<usize>> {
    if ctx_len == 0 {
        return Vec::new();
    }
    (0..len)
        .step_by(ctx_len)
        .map(|s| s..(s + ctx_len).min(len))
        .filter(|r| r.len() >= 2)
        .collect()
}

/// Pooled perplexity of `tokens` over windows of `ctx_len`. Weights are
/// read in NF4 form iff `ctx_len ≥ quantize_threshold`.
pub fn sliding_window_perplexity<M: LogitModel + ?Sized>(
    model: &M,
    tokens: &[u32],
    ctx_len: usize,
    pattern: AttentionPattern,
    quantize_threshold: usize,
) -> Result<PerplexityEntry> {
    if ctx_len < 2 {
        return Err(Error::config(format!("ctx_len must be at least 2, got {ctx_len}")));
    }
    if ctx_len > model.max_context() {
        return Err(Error::config(format!(
            "ctx_len {ctx_len} exceeds the model context {}",
            model.max_context()
        )));
    }
    if tokens.len() < 2 {
        return Err(Error::Data("need at least two tokens to evaluate".into()));
    }
    let quantized = ctx_len >= quantize_threshold;
    let precision = if quantized {
        WeightPrecision::Nf4
    } else {
        WeightPrecision::Full
    };
    let vocab = model.vocab_size();
    let plan = window_plan(tokens.len(), ctx_len);
    let mut nll = 0.0f64;
    let mut count = 0usize;
    for w in &plan {
        let window = &tokens[w.clone()];
        let logits = model.logits(window, pattern.clamp_to(window.len()), precision)?;
        let data = logits.data();
        for t in 0..window.len() - 1 {
            let target = window[t + 1] as usize;
            if target >= vocab {
                return Err(Error::Index(format!("token {target} ≥ vocab {vocab}")));
            }
            nll += row_nll(&data[t * vocab..(t + 1) * vocab], target);
            count += 1;
        }
    }
    let ppl = (nll / count as f64).exp();
    if !ppl.is_finite() {
        return Err(Error::Numeric(format!("perplexity is {ppl}")));
    }
    Ok(PerplexityEntry {
        ctx_len,
        windows: plan.len(),
        tokens: count,
        nll,
        ppl,
        quantized,
    })
}

/// One entry per length; `lengths` must be strictly ascending.
pub fn context_length_sweep<M: LogitModel + ?Sized>(
    model: &M,
    tokens: &[u32],
    lengths: &[usize],
    pattern: AttentionPattern,
    quantize_threshold: usize,
) -> Result<PerplexityReport> {
    if lengths.is_empty() {
        return Err(Error::config("no context lengths given"));
    }
    if lengths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config(format!("context lengths {lengths:?} are not ascending")));
    }
    let entries = lengths
        .iter()
        .map(|&l| sliding_window_perplexity(model, tokens, l, pattern, quantize_threshold))
        .collect::<Result<Vec<_>>>()?;
    Ok(PerplexityReport {
        model: String::new(),
        pattern: pattern.to_string(),
        entries,
        config: BTreeMap::new(),
    })
}

/// Everything an ablation needs to train and score a model.
#[derive(Debug, Clone)]
pub struct AblationSetup {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub train_samples: Vec<Sample>,
    pub eval_tokens: Vec<u32>,
    pub eval_ctx: usize,
    pub eval_pattern: PatternKind,
    pub quantize_threshold: usize,
    /// Resolved run configuration, embedded into every table.
    pub config: BTreeMap<String, String>,
}

impl AblationSetup {
    fn evaluate(&self, model: &Model) -> Result<PerplexityEntry> {
        sliding_window_perplexity(
            model,
            &self.eval_tokens,
            self.eval_ctx,
            model.config().pattern(self.eval_pattern),
            self.quantize_threshold,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub rank: usize,
    pub trainable_params: usize,
    pub ppl: f64,
    pub nll: f64,
    pub tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankTable {
    pub eval_ctx: usize,
    pub rows: Vec<RankRow>,
    pub config: BTreeMap<String, String>,
}

impl RankTable {
    pub fn to_tsv(&self) -> String {
        let mut s = config_comment(&self.config);
        s.push_str("rank\ttrainable_params\tppl\n");
        for r in &self.rows {
            let _ = writeln!(s, "{}\t{}\t{}", r.rank, r.trainable_params, r.ppl);
        }
        s
    }
}

/// Trains one model per rank from the same seed and scores each at the
/// evaluation length.
pub fn ablate_lora_rank(setup: &AblationSetup, ranks: &[usize]) -> Result<RankTable> {
    if ranks.is_empty() {
        return Err(Error::config("no ranks given"));
    }
    let mut seen = ranks.to_vec();
    seen.sort_unstable();
    seen.dedup();
    if seen.len() != ranks.len() {
        return Err(Error::config(format!("ranks {ranks:?} are not distinct")));
    }
    let mut rows = Vec::with_capacity(ranks.len());
    for &rank in ranks {
        let cfg = ModelConfig {
            lora_rank: rank,
            ..setup.model.clone()
        };
        let mut model = build_model(&cfg)?;
        train_loop(&mut model, &setup.train_samples, &setup.train, None, &mut |_, _| Ok(()))?;
        let e = setup.evaluate(&model)?;
        rows.push(RankRow {
            rank,
            trainable_params: model.trainable_param_count(),
            ppl: e.ppl,
            nll: e.nll,
            tokens: e.tokens,
        });
    }
    Ok(RankTable {
        eval_ctx: setup.eval_ctx,
        rows,
        config: setup.config.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub ppl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepCurve {
    pub eval_ctx: usize,
    pub points: Vec<CurvePoint>,
    pub config: BTreeMap<String, String>,
}

impl StepCurve {
    /// For each point, the median PPL over points whose step lies in
    /// `(step − window, step]`.
    pub fn trailing_medians(&self, window: usize) -> Vec<CurvePoint> {
        self.points
            .iter()
            .map(|p| {
                let mut vals: Vec<f64> = self
                    .points
                    .iter()
                    .filter(|q| q.step <= p.step && q.step + window > p.step)
                    .map(|q| q.ppl)
                    .collect();
                vals.sort_by(f64::total_cmp);
                let n = vals.len();
                let median = if n % 2 == 1 {
                    vals[n / 2]
                } else {
                    0.5 * (vals[n / 2 - 1] + vals[n / 2])
                };
                CurvePoint { step: p.step, ppl: median }
            })
            .collect()
    }

    pub fn to_tsv(&self) -> String {
        let mut s = config_comment(&self.config);
        s.push_str("step\tppl\n");
        for p in &self.points {
            let _ = writeln!(s, "{}\t{}", p.step, p.ppl);
        }
        s
    }
}

/// Trains `max_steps` steps and scores the model at step 0 (interpolated
/// positions, untouched adapters) and after every `eval_every` steps.
pub fn ablate_steps(setup: &AblationSetup, eval_every: usize, max_steps: usize) -> Result<StepCurve> {
    if eval_every == 0 {
        return Err(Error::config("eval_every must be at least 1"));
    }
    let train = TrainConfig {
        max_steps,
        ..setup.train.clone()
    };
    let mut model = build_model(&setup.model)?;
    let mut points = Vec::with_capacity(1 + max_steps / eval_every);
    train_loop(&mut model, &setup.train_samples, &train, None, &mut |m, k| {
        if k % eval_every == 0 {
            points.push(CurvePoint {
                step: k,
                ppl: setup.evaluate(m)?.ppl,
            });
        }
        Ok(())
    })?;
    Ok(StepCurve {
        eval_ctx: setup.eval_ctx,
        points,
        config: setup.config.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionTable {
    pub global: PerplexityEntry,
    pub shift_short: PerplexityEntry,
    pub group_size: usize,
    /// `shift_short.ppl − global.ppl`; positive when global attention is better.
    pub difference: f64,
    pub config: BTreeMap<String, String>,
}

impl AttentionTable {
    pub fn to_tsv(&self) -> String {
        let mut s = config_comment(&self.config);
        s.push_str("pattern\tppl\n");
        let _ = writeln!(s, "global\t{}", self.global.ppl);
        let _ = writeln!(s, "shift_short\t{}", self.shift_short.ppl);
        let _ = writeln!(s, "# difference(shift_short - global)={:+}", self.difference);
        s
    }
}

/// Scores one model under both inference patterns on identical windows.
pub fn ablate_attention_pattern<M: LogitModel + ?Sized>(
    model: &M,
    tokens: &[u32],
    ctx_len: usize,
    group_size: usize,
    quantize_threshold: usize,
) -> Result<AttentionTable> {
    let shift = AttentionPattern::ShiftShort { group_size };
    shift.validate(group_size)?;
    let global = sliding_window_perplexity(model, tokens, ctx_len, AttentionPattern::Global, quantize_threshold)?;
    let shift_short = sliding_window_perplexity(model, tokens, ctx_len, shift, quantize_threshold)?;
    Ok(AttentionTable {
        difference: shift_short.ppl - global.ppl,
        global,
        shift_short,
        group_size,
        config: BTreeMap::new(),
    })
}
