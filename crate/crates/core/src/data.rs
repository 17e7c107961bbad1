//! Byte-level tokenization, corpus ingestion and sample construction.
//!
//! Token ids 0..=255 are raw bytes. Id 256 is the end-of-sample marker and
//! doubles as padding.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LossMask;

pub const VOCAB_SIZE: usize = 257;
pub const END_TOKEN: u32 = 256;
pub const PAD_TOKEN: u32 = END_TOKEN;
pub const TOKEN_FILE_MAGIC: &[u8; 4] = b"LQTK";

pub fn tokenize(bytes: &[u8]) -> Vec<u32> {
    bytes.iter().map(|&b| b as u32).collect()
}

/// Inverse of [`tokenize`]. The end marker is dropped; ids above it are rejected.
pub fn detokenize(ids: &[u32]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        match id {
            0..=255 => out.push(id as u8),
            END_TOKEN => {}
            _ => return Err(Error::Index(format!("token {id} outside the byte vocabulary"))),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub source: PathBuf,
    pub token_offset: usize,
    pub token_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedCorpus {
    pub tokens: Vec<u32>,
    pub vocab_size: usize,
    pub manifest: Vec<ManifestEntry>,
}

impl TokenizedCorpus {
    pub fn from_tokens(tokens: Vec<u32>) -> Self {
        let n = tokens.len();
        Self {
            tokens,
            vocab_size: VOCAB_SIZE,
            manifest: vec![ManifestEntry {
                source: PathBuf::from("<memory>"),
                token_offset: 0,
                token_count: n,
            }],
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Tokens contributed by manifest entry `i`.
    pub fn document(&self, i: usize) -> Option<&[u32]> {
        self.manifest
            .get(i)
            .map(|e| &self.tokens[e.token_offset..e.token_offset + e.token_count])
    }

    /// Splits off the trailing `fraction` of tokens as a held-out corpus.
    pub fn split_tail(&self, fraction: f64) -> Result<(Vec<u32>, Vec<u32>)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::config(format!("split fraction {fraction} outside [0, 1)")));
        }
        let cut = self.tokens.len() - (self.tokens.len() as f64 * fraction).round() as usize;
        Ok((self.tokens[..cut].to_vec(), self.tokens[cut..].to_vec()))
    }
}

fn read_source(path: &Path) -> Result<Vec<u32>> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(TOKEN_FILE_MAGIC) {
        parse_token_file(&bytes)
    } else {
        Ok(tokenize(&bytes))
    }
}

/// Loads text or token files in the given order. Files are read in
/// parallel threads; the result only depends on the order of `paths`.
pub fn load_corpus(paths: &[PathBuf]) -> Result<TokenizedCorpus> {
    if paths.is_empty() {
        return Err(Error::Data("no corpus files given".into()));
    }
    let parts: Vec<Result<Vec<u32>>> = std::thread::scope(|s| {
        let handles: Vec<_> = paths.iter().map(|p| s.spawn(move || read_source(p))).collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Data("reader thread panicked".into()))))
            .collect()
    });
    let mut tokens = Vec::new();
    let mut manifest = Vec::with_capacity(paths.len());
    for (path, part) in paths.iter().zip(parts) {
        let part = part.map_err(|e| match e {
            Error::Io(io) => Error::Data(format!("{}: {io}", path.display())),
            other => other,
        })?;
        manifest.push(ManifestEntry {
            source: path.clone(),
            token_offset: tokens.len(),
            token_count: part.len(),
        });
        tokens.extend(part);
    }
    Ok(TokenizedCorpus {
        tokens,
        vocab_size: VOCAB_SIZE,
        manifest,
    })
}

pub fn write_token_file(path: &Path, tokens: &[u32]) -> Result<()> {
    let mut out = Vec::with_capacity(12 + tokens.len() * 4);
    out.extend_from_slice(TOKEN_FILE_MAGIC);
    out.extend_from_slice(&(tokens.len() as u64).to_le_bytes());
    for t in tokens {
        out.extend_from_slice(&t.to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn parse_token_file(bytes: &[u8]) -> Result<Vec<u32>> {
    if bytes.len() < 12 || &bytes[..4] != TOKEN_FILE_MAGIC {
        return Err(Error::Format("missing token file header".into()));
    }
    let count = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
    let body = &bytes[12..];
    if body.len() != count.checked_mul(4).ok_or_else(|| Error::Format("count overflow".into()))? {
        return Err(Error::Format(format!(
            "token file declares {count} ids but holds {} bytes",
            body.len()
        )));
    }
    Ok(body
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}

pub fn read_token_file(path: &Path) -> Result<Vec<u32>> {
    parse_token_file(&fs::read(path)?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub name: String,
    pub tokens: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilterResult {
    pub kept: Vec<Document>,
    pub dropped: usize,
}

/// Keeps documents whose length lies in `[min_tokens, max_tokens]`, in input order.
pub fn filter_by_length(docs: Vec<Document>, min_tokens: usize, max_tokens: usize) -> Result<FilterResult> {
    if min_tokens > max_tokens {
        return Err(Error::config(format!("min_tokens {min_tokens} > max_tokens {max_tokens}")));
    }
    let total = docs.len();
    let kept: Vec<Document> = docs
        .into_iter()
        .filter(|d| (min_tokens..=max_tokens).contains(&d.tokens.len()))
        .collect();
    Ok(FilterResult {
        dropped: total - kept.len(),
        kept,
    })
}

/// Token sequence with its loss mask, aligned position by position. The
/// loss at position `t` predicts `tokens[t]` and counts when `mask[t]` holds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub tokens: Vec<u32>,
    pub mask: LossMask,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub prompt: String,
    pub target: String,
}

/// `prompt ‖ target ‖ END` with the loss restricted to target tokens and
/// the end marker. Overlong samples lose prompt tokens from the left; the
/// target is never cut.
pub fn build_instruction_sample(prompt: &str, target: &str, target_ctx: usize) -> Result<Sample> {
    let p = tokenize(prompt.as_bytes());
    let mut t = tokenize(target.as_bytes());
    t.push(END_TOKEN);
    if t.len() > target_ctx {
        return Err(Error::Length {
            len: t.len(),
            limit: target_ctx,
        });
    }
    let keep = (target_ctx - t.len()).min(p.len());
    let p = &p[p.len() - keep..];
    let mut tokens = Vec::with_capacity(p.len() + t.len());
    tokens.extend_from_slice(p);
    tokens.extend_from_slice(&t);
    let mut mask = vec![false; p.len()];
    mask.extend(std::iter::repeat(true).take(t.len()));
    Ok(Sample {
        tokens,
        mask: LossMask(mask),
    })
}

pub fn read_instruction_jsonl(path: &Path) -> Result<Vec<InstructionRecord>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: InstructionRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_instruction_jsonl(path: &Path, records: &[InstructionRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Consecutive `seq_len` spans of `tokens` (the tail remainder is dropped),
/// in a seeded order, each with a full mask.
pub fn pack_pretraining_batches(tokens: &[u32], seq_len: usize, seed: u64) -> Result<Vec<Sample>> {
    if seq_len < 2 {
        return Err(Error::config("seq_len must be at least 2"));
    }
    if tokens.len() < seq_len + 1 {
        return Err(Error::Data(format!(
            "corpus of {} tokens is shorter than seq_len + 1 = {}",
            tokens.len(),
            seq_len + 1
        )));
    }
    let mut spans: Vec<Sample> = tokens
        .chunks_exact(seq_len)
        .map(|c| Sample {
            tokens: c.to_vec(),
            mask: LossMask::full(seq_len),
        })
        .collect();
    spans.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(spans)
}
