//! Run configuration: plain `key=value` text, one setting per line.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::attention::PatternKind;
use crate::checkpoint::parse_kv;
use crate::data::{load_corpus, pack_pretraining_batches, Sample};
use crate::error::{Error, Result};
use crate::evaluator::AblationSetup;
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

const RUN_KEYS: &[&str] = &[
    "corpus",
    "out_dir",
    "checkpoint",
    "eval_ctx_lens",
    "eval_attention",
    "quantize_threshold",
    "eval_fraction",
    "eval_max_tokens",
    "group_size",
    "grad_clip",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Text or token files, concatenated in order.
    pub corpus: Vec<PathBuf>,
    pub out_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub eval_ctx_lens: Vec<usize>,
    pub eval_attention: PatternKind,
    /// Defaults to the pretrained context.
    pub quantize_threshold: Option<usize>,
    /// Trailing share of the corpus held out for evaluation.
    pub eval_fraction: f64,
    /// Cap on held-out tokens scored per evaluation; 0 means no cap.
    pub eval_max_tokens: usize,
}

impl Default for RunConfig {
    /// The byte-level toy setup.
    fn default() -> Self {
        let model = ModelConfig::default();
        Self {
            eval_ctx_lens: vec![model.target_ctx],
            model,
            train: TrainConfig {
                max_steps: 200,
                ..TrainConfig::default()
            },
            corpus: Vec::new(),
            out_dir: PathBuf::from("runs/default"),
            checkpoint: None,
            eval_attention: PatternKind::Global,
            quantize_threshold: None,
            eval_fraction: 0.1,
            eval_max_tokens: 8192,
        }
    }
}

impl RunConfig {
    pub fn seed(&self) -> u64 {
        self.model.seed
    }

    /// Sets the single top-level seed every subsystem derives from.
    pub fn set_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.train.seed = seed;
    }

    pub fn quantize_threshold(&self) -> usize {
        self.quantize_threshold.unwrap_or(self.model.pretrained_ctx)
    }

    pub fn eval_ctx(&self) -> usize {
        self.eval_ctx_lens.last().copied().unwrap_or(self.model.target_ctx)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.model.seed != self.train.seed {
            return Err(Error::config("model and trainer seeds diverge"));
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return Err(Error::config("eval_fraction must lie in [0, 1)"));
        }
        if let Some(&l) = self.eval_ctx_lens.iter().find(|&&l| l < 2 || l > self.model.target_ctx) {
            return Err(Error::config(format!(
                "evaluation length {l} outside 2..={}",
                self.model.target_ctx
            )));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut kv: BTreeMap<String, String> = self.model.to_kv().into_iter().collect();
        kv.extend(self.train.to_kv());
        let paths: Vec<String> = self.corpus.iter().map(|p| p.display().to_string()).collect();
        kv.insert("corpus".into(), paths.join(","));
        kv.insert("out_dir".into(), self.out_dir.display().to_string());
        if let Some(c) = &self.checkpoint {
            kv.insert("checkpoint".into(), c.display().to_string());
        }
        kv.insert("eval_ctx_lens".into(), join(&self.eval_ctx_lens));
        kv.insert("eval_attention".into(), self.eval_attention.to_string());
        kv.insert("quantize_threshold".into(), self.quantize_threshold().to_string());
        kv.insert("eval_fraction".into(), self.eval_fraction.to_string());
        kv.insert("eval_max_tokens".into(), self.eval_max_tokens.to_string());
        kv
    }

    /// Applies `kv` on top of the current values. Unknown keys are errors.
    pub fn apply_kv(&mut self, kv: &BTreeMap<String, String>) -> Result<()> {
        let model_keys: Vec<String> = ModelConfig::default().to_kv().into_iter().map(|(k, _)| k).collect();
        let train_keys: Vec<String> = TrainConfig::default().to_kv().into_iter().map(|(k, _)| k).collect();
        for k in kv.keys() {
            let known = RUN_KEYS.contains(&k.as_str()) || model_keys.contains(k) || train_keys.contains(k);
            if !known {
                return Err(Error::config(format!("unknown setting {k}")));
            }
        }
        self.model.apply_kv(kv)?;
        self.train.apply_kv(kv)?;
        for (k, v) in kv {
            let v = v.trim();
            match k.as_str() {
                "corpus" => {
                    self.corpus = v.split(',').filter(|s| !s.is_empty()).map(PathBuf::from).collect()
                }
                "out_dir" => self.out_dir = PathBuf::from(v),
                "checkpoint" => self.checkpoint = (!v.is_empty()).then(|| PathBuf::from(v)),
                "eval_ctx_lens" => self.eval_ctx_lens = parse_list(v)?,
                "eval_attention" => self.eval_attention = v.parse()?,
                "quantize_threshold" => self.quantize_threshold = Some(parse_num(k, v)?),
                "eval_fraction" => self.eval_fraction = parse_num(k, v)?,
                "eval_max_tokens" => self.eval_max_tokens = parse_num(k, v)?,
                _ => {}
            }
        }
        Ok(())
    }

    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        let mut c = Self::default();
        c.apply_kv(kv)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        Self::from_kv(&parse_kv(&text)?)
    }

    pub fn to_text(&self) -> String {
        self.to_kv().iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Loads the corpus and splits it into packed training spans and a
    /// held-out evaluation tail.
    pub fn load_data(&self) -> Result<(Vec<Sample>, Vec<u32>)> {
        if self.corpus.is_empty() {
            return Err(Error::config("no corpus configured"));
        }
        if let Some(missing) = self.corpus.iter().find(|p| !p.exists()) {
            return Err(Error::config(format!("corpus file {} does not exist", missing.display())));
        }
        let corpus = load_corpus(&self.corpus)?;
        let (train, mut eval) = corpus.split_tail(self.eval_fraction)?;
        if self.eval_max_tokens > 0 && eval.len() > self.eval_max_tokens {
            eval.truncate(self.eval_max_tokens);
        }
        let samples = pack_pretraining_batches(&train, self.model.target_ctx, self.seed() + 2)?;
        Ok((samples, eval))
    }

    pub fn ablation_setup(&self) -> Result<AblationSetup> {
        self.validate()?;
        let (train_samples, eval_tokens) = self.load_data()?;
        Ok(AblationSetup {
            model: self.model.clone(),
            train: self.train.clone(),
            train_samples,
            eval_tokens,
            eval_ctx: self.eval_ctx(),
            eval_pattern: self.eval_attention,
            quantize_threshold: self.quantize_threshold(),
            config: self.to_kv(),
        })
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn parse_num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::config(format!("cannot parse {k}={v}")))
}

/// Comma-separated list of positive integers.
pub fn parse_list(v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| parse_num("list entry", s))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.corpus = vec!["a.txt".into(), "b.bin".into()];
        c.eval_ctx_lens = vec![8, 16, 32];
        c.set_seed(42);
        c.train.grad_clip = Some(1.0);
        let back = RunConfig::from_kv(&parse_kv(&c.to_text()).unwrap()).unwrap();
        let mut expected = c.clone();
        expected.quantize_threshold = Some(c.quantize_threshold());
        assert_eq!(back, expected);
    }

    #[test]
    fn unknown_keys_rejected() {
        let kv = BTreeMap::from([("learning_rate".to_string(), "1".to_string())]);
        assert!(matches!(RunConfig::from_kv(&kv), Err(Error::Config(_))));
    }

    #[test]
    fn defaults_are_the_toy_setup() {
        let c = RunConfig::default();
        assert!(c.validate().is_ok());
        assert_eq!(c.model.group_size(), 32);
        assert_eq!(c.quantize_threshold(), 64);
        assert_eq!(c.train.global_batch(), 16);
        let bad = RunConfig {
            eval_ctx_lens: vec![256],
            ..RunConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn missing_corpus_is_a_config_error() {
        let c = RunConfig {
            corpus: vec!["/nonexistent/x.txt".into()],
            ..RunConfig::default()
        };
        assert!(matches!(c.load_data(), Err(Error::Config(_))));
    }
}
