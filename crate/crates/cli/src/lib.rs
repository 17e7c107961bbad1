//! Command implementations behind the `lql` binary.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use lql_core::attention::PatternKind;
use lql_core::checkpoint::{load_checkpoint, CheckpointFile, SectionKind};
use lql_core::config::RunConfig;
use lql_core::data::{
    build_instruction_sample, load_corpus, read_instruction_jsonl, write_token_file, ManifestEntry,
};
use lql_core::evaluator::{ablate_attention_pattern, ablate_lora_rank, ablate_steps, context_length_sweep};
use lql_core::model::{build_model, Model};
use lql_core::quantizer::{quantize_tensor_with, storage_report, StorageReport, SECTION_HEADER_BYTES};
use lql_core::trainer::train_loop;
use lql_core::Error;

pub const SEED_ENV: &str = "LQL_SEED";

#[derive(Debug, Parser)]
#[command(name = "lql", version, about = "Long-context adapter finetuning on a 4-bit base")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Finetune adapters on a corpus and write checkpoints and a log.
    Train(TrainArgs),
    /// Sliding-window perplexity of a checkpoint over several lengths.
    Eval(EvalArgs),
    /// Storage accounting of the quantized tensors in a checkpoint.
    QuantizeReport(QuantizeArgs),
    /// Rank, step or attention-pattern ablation.
    Ablate(AblateArgs),
    /// Tokenize text or instruction files into a token file.
    DataPrepare(DataArgs),
}

#[derive(Debug, Clone, Args, Default)]
pub struct CommonArgs {
    /// key=value configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run directory for every output.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Corpus files (comma separated or repeated).
    #[arg(long, value_delimiter = ',')]
    pub corpus: Vec<PathBuf>,
    /// Extra `key=value` overrides.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub grad_accum: Option<usize>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Evaluation lengths, ascending.
    #[arg(long, value_delimiter = ',')]
    pub ctx_lens: Vec<usize>,
    /// `global` or `shift_short`.
    #[arg(long)]
    pub attention: Option<PatternKind>,
    #[arg(long)]
    pub quantize_threshold: Option<usize>,
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(subcommand)]
    pub kind: AblateKind,
}

#[derive(Debug, Subcommand)]
pub enum AblateKind {
    Rank {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_delimiter = ',', default_values_t = [8usize, 16, 32, 64])]
        ranks: Vec<usize>,
        #[arg(long)]
        max_steps: Option<usize>,
    },
    Steps {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value_t = 20)]
        every: usize,
        #[arg(long = "max", default_value_t = 200)]
        max: usize,
    },
    Attention {
        #[command(flatten)]
        common: CommonArgs,
        /// Trained checkpoint; a model is trained from the config when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        ctx_len: Option<usize>,
    },
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Text or token files to concatenate.
    #[arg(long, value_delimiter = ',')]
    pub input: Vec<PathBuf>,
    /// JSON-lines instruction file with `prompt` and `target` fields.
    #[arg(long)]
    pub instructions: Option<PathBuf>,
    #[arg(long)]
    pub target_ctx: Option<usize>,
    #[arg(long)]
    pub output: PathBuf,
}

/// Failure with its process exit code: 2 for usage or configuration
/// problems, 1 for everything that goes wrong at run time.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => 2,
            _ => 1,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError {
        code: 2,
        message: msg.into(),
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Defaults, then the config file, then `LQL_SEED`, then flags.
pub fn resolve(common: &CommonArgs, overrides: &[(&str, Option<String>)]) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Ok(s) = std::env::var(SEED_ENV) {
        let seed = s
            .trim()
            .parse()
            .map_err(|_| usage(format!("{SEED_ENV}={s} is not an integer")))?;
        cfg.set_seed(seed);
    }
    let mut kv = BTreeMap::new();
    for s in &common.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {s}")))?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    for (k, v) in overrides {
        if let Some(v) = v {
            kv.insert(k.to_string(), v.clone());
        }
    }
    cfg.apply_kv(&kv)?;
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    if !common.corpus.is_empty() {
        cfg.corpus = common.corpus.clone();
    }
    if let Some(d) = &common.out_dir {
        cfg.out_dir = d.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn prepare_out_dir(cfg: &RunConfig) -> CliResult<()> {
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("run.cfg"), cfg.to_text())?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn opt<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(T::to_string)
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::QuantizeReport(a) => cmd_quantize_report(&a),
        Command::Ablate(a) => cmd_ablate(a.kind),
        Command::DataPrepare(a) => cmd_data_prepare(&a),
    }
}

pub fn cmd_train(a: &TrainArgs) -> CliResult<()> {
    let cfg = resolve(
        &a.common,
        &[
            ("max_steps", opt(&a.max_steps)),
            ("lr", opt(&a.lr)),
            ("warmup_steps", opt(&a.warmup)),
            ("grad_accum_steps", opt(&a.grad_accum)),
            ("lora_rank", opt(&a.rank)),
            ("checkpoint_every", opt(&a.checkpoint_every)),
            ("grad_clip", opt(&a.grad_clip)),
        ],
    )?;
    let (samples, _) = cfg.load_data()?;
    prepare_out_dir(&cfg)?;
    let mut model = build_model(&cfg.model)?;
    eprintln!(
        "training {} adapter parameters for {} steps on {} spans",
        model.trainable_param_count(),
        cfg.train.max_steps,
        samples.len()
    );
    let log = train_loop(&mut model, &samples, &cfg.train, Some(&cfg.out_dir), &mut |_, _| Ok(()))?;
    if let (Some(first), Some(last)) = (log.entries.first(), log.entries.last()) {
        println!("loss {:.4} -> {:.4} over {} steps", first.loss, last.loss, log.entries.len());
    }
    if let Some(p) = log.checkpoints.last() {
        println!("checkpoint {}", p.display());
    }
    Ok(())
}

fn checkpoint_for(explicit: &Option<PathBuf>, cfg: &RunConfig) -> CliResult<PathBuf> {
    let path = explicit
        .clone()
        .or_else(|| cfg.checkpoint.clone())
        .ok_or_else(|| usage("no checkpoint given"))?;
    if !path.exists() {
        return Err(usage(format!("checkpoint {} does not exist", path.display())));
    }
    Ok(path)
}

/// The checkpoint's model settings take precedence over the run config.
fn load_model(path: &Path, cfg: &mut RunConfig) -> CliResult<Model> {
    let (model, _) = load_checkpoint(path)?;
    cfg.model = model.config().clone();
    cfg.train.seed = cfg.model.seed;
    cfg.checkpoint = Some(path.to_path_buf());
    Ok(model)
}

pub fn cmd_eval(a: &EvalArgs) -> CliResult<()> {
    let lens = (!a.ctx_lens.is_empty()).then(|| {
        a.ctx_lens
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(",")
    });
    let mut cfg = resolve(
        &a.common,
        &[
            ("eval_ctx_lens", lens),
            ("eval_attention", opt(&a.attention)),
            ("quantize_threshold", opt(&a.quantize_threshold)),
        ],
    )?;
    let ckpt = checkpoint_for(&a.checkpoint, &cfg)?;
    let model = load_model(&ckpt, &mut cfg)?;
    cfg.validate()?;
    let (_, eval) = cfg.load_data()?;
    let pattern = model.config().pattern(cfg.eval_attention);
    let mut report = context_length_sweep(&model, &eval, &cfg.eval_ctx_lens, pattern, cfg.quantize_threshold())?;
    report.model = ckpt.display().to_string();
    report.config = cfg.to_kv();
    prepare_out_dir(&cfg)?;
    fs::write(cfg.out_dir.join("eval_report.json"), report.to_json()? + "\n")?;
    fs::write(cfg.out_dir.join("eval_report.tsv"), report.to_tsv())?;
    for e in &report.entries {
        println!("ctx {:>6}  ppl {:.4}  tokens {}", e.ctx_len, e.ppl, e.tokens);
    }
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct TensorStorage {
    pub name: String,
    pub stored: StorageReport,
    pub section_bytes: u64,
    pub without_double_quant: StorageReport,
    pub with_double_quant: StorageReport,
}

#[derive(Debug, Serialize)]
pub struct QuantizeReport {
    pub checkpoint: String,
    pub tensors: Vec<TensorStorage>,
    pub stored: StorageReport,
    pub without_double_quant: StorageReport,
    pub with_double_quant: StorageReport,
    /// Bits per parameter saved by double quantization.
    pub saving: f64,
}

/// Storage accounting of every NF4 section of a checkpoint, with each
/// report checked against the section's byte count.
pub fn quantize_report(path: &Path) -> CliResult<QuantizeReport> {
    let file = CheckpointFile::read(path)?;
    let block = file
        .meta
        .get("quant_block_size")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Format("checkpoint lacks quant_block_size".into()))?;
    let superblock = file
        .meta
        .get("quant_superblock")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Format("checkpoint lacks quant_superblock".into()))?;
    let mut tensors = Vec::new();
    for s in file.sections.iter().filter(|s| s.kind == SectionKind::Nf4) {
        let q = s.to_quantized(superblock)?;
        let stored = storage_report(&q);
        let expected = SECTION_HEADER_BYTES as u64 + stored.payload_bytes();
        if expected != s.payload.len() as u64 {
            return Err(Error::Format(format!(
                "section {} holds {} bytes, accounting gives {expected}",
                s.name,
                s.payload.len()
            ))
            .into());
        }
        let base = s.name.trim_end_matches(".nf4");
        let full = file.section(base)?.to_tensor()?;
        tensors.push(TensorStorage {
            name: base.to_string(),
            stored,
            section_bytes: s.payload.len() as u64,
            without_double_quant: storage_report(&quantize_tensor_with(&full, block, false, superblock)?),
            with_double_quant: storage_report(&quantize_tensor_with(&full, block, true, superblock)?),
        });
    }
    if tensors.is_empty() {
        return Err(Error::Format("checkpoint holds no quantized tensors".into()).into());
    }
    let agg = |f: fn(&TensorStorage) -> &StorageReport| StorageReport::aggregate(tensors.iter().map(f));
    let stored = agg(|t| &t.stored);
    let without = agg(|t| &t.without_double_quant);
    let with = agg(|t| &t.with_double_quant);
    Ok(QuantizeReport {
        checkpoint: path.display().to_string(),
        saving: without.bits_per_parameter - with.bits_per_parameter,
        tensors,
        stored,
        without_double_quant: without,
        with_double_quant: with,
    })
}

pub fn cmd_quantize_report(a: &QuantizeArgs) -> CliResult<()> {
    if !a.checkpoint.exists() {
        return Err(usage(format!("checkpoint {} does not exist", a.checkpoint.display())));
    }
    let report = quantize_report(&a.checkpoint)?;
    let mut tsv = String::from("tensor\tparameters\tbits_per_parameter\tsection_bytes\n");
    for t in &report.tensors {
        tsv += &format!(
            "{}\t{}\t{}\t{}\n",
            t.name, t.stored.parameters, t.stored.bits_per_parameter, t.section_bytes
        );
    }
    tsv += &format!(
        "# stored {:.6} bits/param; without double quantization {:.6}; with {:.6}; saving {:.6}\n",
        report.stored.bits_per_parameter,
        report.without_double_quant.bits_per_parameter,
        report.with_double_quant.bits_per_parameter,
        report.saving
    );
    print!("{tsv}");
    if let Some(dir) = &a.out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("quantize_report.tsv"), &tsv)?;
        write_json(&dir.join("quantize_report.json"), &report)?;
    }
    Ok(())
}

pub fn cmd_ablate(kind: AblateKind) -> CliResult<()> {
    match kind {
        AblateKind::Rank {
            common,
            ranks,
            max_steps,
        } => {
            let cfg = resolve(&common, &[("max_steps", opt(&max_steps))])?;
            let setup = cfg.ablation_setup()?;
            let table = ablate_lora_rank(&setup, &ranks)?;
            prepare_out_dir(&cfg)?;
            fs::write(cfg.out_dir.join("ablate_rank.tsv"), table.to_tsv())?;
            write_json(&cfg.out_dir.join("ablate_rank.json"), &table)?;
            for r in &table.rows {
                println!("rank {:>3}  params {:>7}  ppl {:.4}", r.rank, r.trainable_params, r.ppl);
            }
        }
        AblateKind::Steps { common, every, max } => {
            let cfg = resolve(&common, &[("max_steps", Some(max.to_string()))])?;
            let setup = cfg.ablation_setup()?;
            let curve = ablate_steps(&setup, every, max)?;
            prepare_out_dir(&cfg)?;
            fs::write(cfg.out_dir.join("ablate_steps.tsv"), curve.to_tsv())?;
            write_json(&cfg.out_dir.join("ablate_steps.json"), &curve)?;
            for p in &curve.points {
                println!("step {:>5}  ppl {:.4}", p.step, p.ppl);
            }
        }
        AblateKind::Attention {
            common,
            checkpoint,
            ctx_len,
        } => {
            let mut cfg = resolve(&common, &[])?;
            let model = match checkpoint.or_else(|| cfg.checkpoint.clone()) {
                Some(p) => {
                    let p = checkpoint_for(&Some(p), &cfg)?;
                    load_model(&p, &mut cfg)?
                }
                None => {
                    let (samples, _) = cfg.load_data()?;
                    let mut m = build_model(&cfg.model)?;
                    train_loop(&mut m, &samples, &cfg.train, None, &mut |_, _| Ok(()))?;
                    m
                }
            };
            if model.config().train_attention != PatternKind::ShiftShort {
                return Err(usage("attention ablation expects a model trained with shift_short"));
            }
            let ctx = ctx_len.unwrap_or(model.config().target_ctx);
            let (_, eval) = cfg.load_data()?;
            let mut table = ablate_attention_pattern(
                &model,
                &eval,
                ctx,
                model.config().group_size(),
                cfg.quantize_threshold(),
            )?;
            table.config = cfg.to_kv();
            prepare_out_dir(&cfg)?;
            fs::write(cfg.out_dir.join("ablate_attention.tsv"), table.to_tsv())?;
            write_json(&cfg.out_dir.join("ablate_attention.json"), &table)?;
            println!("global       ppl {:.4}", table.global.ppl);
            println!("shift_short  ppl {:.4}", table.shift_short.ppl);
            println!("difference   {:+.4}", table.difference);
        }
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct DataManifest {
    output: String,
    tokens: usize,
    sources: Vec<ManifestEntry>,
    instruction_samples: usize,
    loss_tokens: usize,
}

pub fn cmd_data_prepare(a: &DataArgs) -> CliResult<()> {
    if a.input.is_empty() && a.instructions.is_none() {
        return Err(usage("nothing to prepare: pass --input or --instructions"));
    }
    for p in a.input.iter().chain(&a.instructions) {
        if !p.exists() {
            return Err(usage(format!("input {} does not exist", p.display())));
        }
    }
    if let Some(dir) = a.output.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tokens = Vec::new();
    let mut sources = Vec::new();
    if !a.input.is_empty() {
        let corpus = load_corpus(&a.input)?;
        tokens = corpus.tokens;
        sources = corpus.manifest;
    }
    let mut samples = 0;
    let mut loss_tokens = 0;
    if let Some(path) = &a.instructions {
        let ctx = a.target_ctx.unwrap_or(RunConfig::default().model.target_ctx);
        // corpus tokens are all loss tokens, so the mask lines up with the token file
        let mut masks = vec![b'1'; tokens.len()];
        for rec in read_instruction_jsonl(path)? {
            let s = build_instruction_sample(&rec.prompt, &rec.target, ctx)?;
            loss_tokens += s.mask.count();
            samples += 1;
            tokens.extend_from_slice(&s.tokens);
            masks.extend(s.mask.0.iter().map(|&m| if m { b'1' } else { b'0' }));
        }
        fs::write(a.output.with_extension("mask"), masks)?;
    }
    write_token_file(&a.output, &tokens)?;
    let manifest = DataManifest {
        output: a.output.display().to_string(),
        tokens: tokens.len(),
        sources,
        instruction_samples: samples,
        loss_tokens,
    };
    write_json(&a.output.with_extension("manifest.json"), &manifest)?;
    println!("{} tokens -> {}", tokens.len(), a.output.display());
    Ok(())
}
