//! Checkpoint file format.
//!
//! ```text
//! "LQLR" | version u32 | meta_len u32 | meta (UTF-8 key=value lines)
//! | section_count u32 | sections…
//! section: name_len u16 | name | kind u8 | ndim u8 | dims u64… | payload_len u64 | payload
//! ```
//!
//! Kind 0 is raw little-endian f32, kind 1 is an NF4 section as written by
//! [`QuantizedTensor::write_section`]. All integers are little-endian.
//! Adapter factors live in sections `layer{i}.{proj}.A` and `.B`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::lora::{AdapterTarget, LoraAdapter, Projection};
use crate::model::{AdaptedProjection, FrozenMatrix, Layer, Model, ModelConfig};
use crate::quantizer::{QuantizedTensor, Reader};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LQLR";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SectionKind {
    F32,
    Nf4,
}

impl SectionKind {
    fn code(self) -> u8 {
        match self {
            SectionKind::F32 => 0,
            SectionKind::Nf4 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub kind: SectionKind,
    pub shape: Vec<usize>,
    pub payload: Vec<u8>,
}

impl Section {
    pub fn f32(name: impl Into<String>, t: &Tensor) -> Self {
        let mut payload = Vec::with_capacity(t.numel() * 4);
        t.data().iter().for_each(|v| payload.extend_from_slice(&v.to_le_bytes()));
        Self {
            name: name.into(),
            kind: SectionKind::F32,
            shape: t.shape().to_vec(),
            payload,
        }
    }

    pub fn nf4(name: impl Into<String>, q: &QuantizedTensor) -> Self {
        Self {
            name: name.into(),
            kind: SectionKind::Nf4,
            shape: q.shape().to_vec(),
            payload: q.section_bytes(),
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        if self.kind != SectionKind::F32 {
            return Err(Error::Format(format!("section {} is not f32", self.name)));
        }
        if self.payload.len() != self.shape.iter().product::<usize>() * 4 {
            return Err(Error::Format(format!("section {} has a bad payload length", self.name)));
        }
        let data = self
            .payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Tensor::new(self.shape.clone(), data)
    }

    pub fn to_quantized(&self, superblock: usize) -> Result<QuantizedTensor> {
        if self.kind != SectionKind::Nf4 {
            return Err(Error::Format(format!("section {} is not nf4", self.name)));
        }
        QuantizedTensor::read_section(&self.payload, self.shape.clone(), superblock)
    }
}

/// Parsed file contents before any model is rebuilt.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CheckpointFile {
    pub meta: BTreeMap<String, String>,
    pub sections: Vec<Section>,
}

impl CheckpointFile {
    pub fn section(&self, name: &str) -> Result<&Section> {
        self.sections
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Format(format!("missing section {name}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta: String = self.meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for s in &self.sections {
            out.extend_from_slice(&(s.name.len() as u16).to_le_bytes());
            out.extend_from_slice(s.name.as_bytes());
            out.push(s.kind.code());
            out.push(s.shape.len() as u8);
            for &d in &s.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&(s.payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&s.payload);
        }
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let meta_text = std::str::from_utf8(r.take(meta_len)?)
            .map_err(|_| Error::Format("metadata is not UTF-8".into()))?;
        let meta = parse_kv(meta_text)?;
        let count = r.u32()? as usize;
        let mut sections = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("section name is not UTF-8".into()))?
                .to_string();
            let kind = match r.u8()? {
                0 => SectionKind::F32,
                1 => SectionKind::Nf4,
                k => return Err(Error::Format(format!("unknown section kind {k}"))),
            };
            let ndim = r.u8()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len = r.u64()? as usize;
            let payload = r.take(len)?.to_vec();
            sections.push(Section {
                name,
                kind,
                shape,
                payload,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { meta, sections })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&fs::read(path)?)
    }
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected key=value", i + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn push_frozen(sections: &mut Vec<Section>, name: &str, m: &FrozenMatrix) {
    sections.push(Section::f32(name, m.full()));
    if let Some(q) = m.quantized() {
        sections.push(Section::nf4(format!("{name}.nf4"), q));
    }
}

/// Serializes a model; `extra` entries are stored next to the config.
pub fn checkpoint_file(model: &Model, extra: &BTreeMap<String, String>) -> Result<CheckpointFile> {
    if model.is_merged() {
        return Err(Error::State("merged models are not checkpointed".into()));
    }
    let mut meta: BTreeMap<String, String> = model.config().to_kv().into_iter().collect();
    for (k, v) in extra {
        if meta.contains_key(k) {
            return Err(Error::config(format!("metadata key {k} collides with the config")));
        }
        meta.insert(k.clone(), v.clone());
    }
    let mut sections = Vec::new();
    push_frozen(&mut sections, "embed.weight", &model.embedding);
    for (i, l) in model.layers.iter().enumerate() {
        sections.push(Section::f32(format!("layer{i}.attn_norm.weight"), &l.attn_norm));
        sections.push(Section::f32(format!("layer{i}.ffn_norm.weight"), &l.ffn_norm));
        for (p, ap) in Projection::ALL.iter().zip(&l.projections) {
            let prefix = format!("layer{i}.{}", p.name());
            push_frozen(&mut sections, &format!("{prefix}.weight"), &ap.base);
            sections.push(Section::f32(format!("{prefix}.A"), ap.adapter.a()));
            sections.push(Section::f32(format!("{prefix}.B"), ap.adapter.b()));
        }
    }
    sections.push(Section::f32("final_norm.weight", &model.final_norm));
    if let Some(h) = &model.head {
        push_frozen(&mut sections, "lm_head.weight", h);
    }
    Ok(CheckpointFile { meta, sections })
}

/// Writes through a temporary file and a rename so a failed write never
/// leaves a partial checkpoint behind.
pub fn save_checkpoint(path: &Path, model: &Model, extra: &BTreeMap<String, String>) -> Result<()> {
    let bytes = checkpoint_file(model, extra)?.to_bytes();
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn load_frozen(file: &CheckpointFile, name: &str, superblock: usize) -> Result<FrozenMatrix> {
    let full = file.section(name)?.to_tensor()?;
    let q_name = format!("{name}.nf4");
    let q = match file.sections.iter().find(|s| s.name == q_name) {
        Some(s) => Some(s.to_quantized(superblock)?),
        None => None,
    };
    FrozenMatrix::new(full, q)
}

pub fn model_from_file(file: &CheckpointFile) -> Result<Model> {
    let mut config = ModelConfig::default();
    config.group_size = None;
    config.apply_kv(&file.meta)?;
    let sb = config.quant_superblock;
    let embedding = load_frozen(file, "embed.weight", sb)?;
    let mut layers = Vec::with_capacity(config.n_layers);
    for i in 0..config.n_layers {
        let mut projections = Vec::with_capacity(7);
        for p in Projection::ALL {
            let prefix = format!("layer{i}.{}", p.name());
            let base = load_frozen(file, &format!("{prefix}.weight"), sb)?;
            let adapter = LoraAdapter::from_parts(
                AdapterTarget { layer: i, projection: p },
                file.section(&format!("{prefix}.A"))?.to_tensor()?,
                file.section(&format!("{prefix}.B"))?.to_tensor()?,
                config.lora_alpha,
            )?;
            projections.push(AdaptedProjection::new(base, adapter)?);
        }
        layers.push(Layer {
            attn_norm: file.section(&format!("layer{i}.attn_norm.weight"))?.to_tensor()?,
            ffn_norm: file.section(&format!("layer{i}.ffn_norm.weight"))?.to_tensor()?,
            projections,
        });
    }
    let final_norm = file.section("final_norm.weight")?.to_tensor()?;
    let head = if config.tie_embeddings {
        None
    } else {
        Some(load_frozen(file, "lm_head.weight", sb)?)
    };
    Model::from_parts(config, embedding, layers, final_norm, head)
}

/// Loads a model and the full metadata map (config keys included).
pub fn load_checkpoint(path: &Path) -> Result<(Model, BTreeMap<String, String>)> {
    let file = CheckpointFile::read(path)?;
    let model = model_from_file(&file)?;
    Ok((model, file.meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionPattern;
    use crate::model::build_model;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 40,
            d_model: 16,
            n_heads: 2,
            n_layers: 1,
            d_ff: 20,
            pretrained_ctx: 8,
            target_ctx: 16,
            lora_rank: 2,
            quant_block_size: 16,
            seed: 11,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut m = build_model(&tiny()).unwrap();
        for (i, ad) in m.adapters_mut().enumerate() {
            ad.b_mut().data_mut().iter_mut().enumerate().for_each(|(j, v)| *v = (i * 31 + j) as f32 * 1e-3);
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.lqlr");
        let extra = BTreeMap::from([("step".to_string(), "7".to_string())]);
        save_checkpoint(&p, &m, &extra).unwrap();
        let (back, meta) = load_checkpoint(&p).unwrap();
        assert_eq!(back, m);
        assert_eq!(meta["step"], "7");
        let toks = [1, 2, 3, 4, 5];
        assert_eq!(
            back.forward(&toks, AttentionPattern::Global).unwrap(),
            m.forward(&toks, AttentionPattern::Global).unwrap()
        );
        assert!(!dir.path().join("m.partial").exists());
    }

    #[test]
    fn adapter_sections_are_named() {
        let m = build_model(&tiny()).unwrap();
        let f = checkpoint_file(&m, &BTreeMap::new()).unwrap();
        assert!(f.section("layer0.q_proj.A").is_ok());
        assert!(f.section("layer0.down_proj.B").is_ok());
        assert_eq!(f.section("layer0.k_proj.weight.nf4").unwrap().kind, SectionKind::Nf4);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let m = build_model(&tiny()).unwrap();
        let bytes = checkpoint_file(&m, &BTreeMap::new()).unwrap().to_bytes();
        assert!(CheckpointFile::parse(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(CheckpointFile::parse(&bad), Err(Error::Format(_))));
        let mut extra = bytes;
        extra.push(0);
        assert!(CheckpointFile::parse(&extra).is_err());
    }

    #[test]
    fn kv_parsing() {
        let kv = parse_kv("# c\n a = 1\n\nb=x=y\n").unwrap();
        assert_eq!(kv["a"], "1");
        assert_eq!(kv["b"], "x=y");
        assert!(parse_kv("novalue").is_err());
    }
}
