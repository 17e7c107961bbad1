//! 4-bit NormalFloat blockwise quantization.
//!
//! Each block of `block_size` consecutive elements is divided by its absolute
//! maximum and every element is replaced by the index of the nearest level of
//! the NF4 codebook. Two codes are packed per byte, low nibble first.
//!
//! With double quantization the per-block absmax constants are themselves
//! quantized to 8 bits, affinely per superblock of absmax values, storing one
//! `f32` minimum and one `f32` step per superblock.

use std::sync::OnceLock;

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_BLOCK_SIZE: usize = 64;
pub const DEFAULT_SUPERBLOCK: usize = 256;

/// Section header: element count (u64), block size (u32), flags (u8).
pub const SECTION_HEADER_BYTES: usize = 13;
const FLAG_DOUBLE_QUANTIZED: u8 = 1;

/// The 16 NF4 levels, strictly increasing, containing −1, 0 and 1 exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Nf4Codebook {
    levels: [f32; 16],
}

/// Probability at which the outermost quantile is taken: the midpoint of
/// `1 − 1/(2·15)` and `1 − 1/(2·16)`, which keeps the endpoints finite.
pub const NF4_OFFSET: f64 = 0.5 * ((1.0 - 1.0 / 30.0) + (1.0 - 1.0 / 32.0));

/// Builds the NF4 codebook from standard-normal quantiles: eight levels from
/// the positive half, seven from the negative half, and an exact zero, all
/// divided by the largest quantile.
pub fn build_nf4_codebook() -> Nf4Codebook {
    let normal = Normal::standard();
    let ppf = |p: f64| normal.inverse_cdf(p);
    let half_grid = |count: usize| -> Vec<f64> {
        // `count` evenly spaced probabilities from NF4_OFFSET toward 0.5,
        // excluding 0.5 itself
        let step = (0.5 - NF4_OFFSET) / count as f64;
        (0..count).map(|j| NF4_OFFSET + j as f64 * step).collect()
    };
    let top = ppf(NF4_OFFSET);
    let mut values: Vec<f64> = Vec::with_capacity(16);
    values.extend(half_grid(8).into_iter().map(|p| ppf(p) / top));
    values.push(0.0);
    values.extend(half_grid(7).into_iter().map(|p| -ppf(p) / top));
    values.sort_by(|a, b| a.partial_cmp(b).expect("quantiles are finite"));
    let mut levels = [0f32; 16];
    for (l, v) in levels.iter_mut().zip(&values) {
        *l = *v as f32;
    }
    levels[0] = -1.0;
    levels[15] = 1.0;
    Nf4Codebook { levels }
}

/// Process-wide codebook.
pub fn nf4() -> &'static Nf4Codebook {
    static BOOK: OnceLock<Nf4Codebook> = OnceLock::new();
    BOOK.get_or_init(build_nf4_codebook)
}

impl Nf4Codebook {
    pub fn levels(&self) -> &[f32; 16] {
        &self.levels
    }

    pub fn value(&self, code: u8) -> f32 {
        self.levels[code as usize & 0xF]
    }

    /// Index of the level `0.0`.
    pub fn zero_code(&self) -> u8 {
        self.levels.iter().position(|&v| v == 0.0).expect("zero level") as u8
    }

    /// Widest distance between adjacent levels.
    pub fn max_gap(&self) -> f32 {
        self.levels
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(0.0, f32::max)
    }

    /// Nearest level to `v` (a value already divided by its block absmax);
    /// exact midpoints resolve to the lower index.
    pub fn nearest(&self, v: f32) -> u8 {
        let mut code = 0u8;
        for w in self.levels.windows(2) {
            let mid = 0.5 * (w[0] + w[1]);
            if v > mid {
                code += 1;
            } else {
                break;
            }
        }
        code
    }
}

/// Per-block scaling constants.
#[derive(Debug, Clone, PartialEq)]
pub enum Absmax {
    Full(Vec<f32>),
    /// 8-bit codes with an affine `(min, scale)` pair per superblock.
    Double {
        codes: Vec<u8>,
        superblock: usize,
        mins: Vec<f32>,
        scales: Vec<f32>,
    },
}

impl Absmax {
    pub fn n_blocks(&self) -> usize {
        match self {
            Absmax::Full(v) => v.len(),
            Absmax::Double { codes, .. } => codes.len(),
        }
    }

    /// Absmax of block `b` as used for dequantization.
    pub fn get(&self, b: usize) -> f32 {
        match self {
            Absmax::Full(v) => v[b],
            Absmax::Double {
                codes,
                superblock,
                mins,
                scales,
            } => {
                let s = b / superblock;
                mins[s] + codes[b] as f32 * scales[s]
            }
        }
    }

    /// Quantizes nonnegative absmax values to 8 bits per superblock.
    pub fn double_quantize(values: &[f32], superblock: usize) -> Self {
        let mut codes = Vec::with_capacity(values.len());
        let mut mins = Vec::new();
        let mut scales = Vec::new();
        for chunk in values.chunks(superblock) {
            let min = chunk.iter().copied().fold(f32::INFINITY, f32::min);
            let max = chunk.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let scale = (max - min) / 255.0;
            for &a in chunk {
                let c = if scale > 0.0 {
                    ((a - min) / scale).round().clamp(0.0, 255.0) as u8
                } else {
                    0
                };
                codes.push(c);
            }
            mins.push(min);
            scales.push(scale);
        }
        Absmax::Double {
            codes,
            superblock,
            mins,
            scales,
        }
    }
}

/// Frozen 4-bit representation of a weight tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    shape: Vec<usize>,
    len: usize,
    block_size: usize,
    packed: Vec<u8>,
    absmax: Absmax,
}

/// Bit accounting of a [`QuantizedTensor`].
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StorageReport {
    pub parameters: u64,
    pub code_bits: u64,
    pub absmax_bits: u64,
    pub superblock_bits: u64,
    pub total_bits: u64,
    pub bits_per_parameter: f64,
}

impl StorageReport {
    fn from_parts(parameters: u64, code_bits: u64, absmax_bits: u64, superblock_bits: u64) -> Self {
        let total_bits = code_bits + absmax_bits + superblock_bits;
        Self {
            parameters,
            code_bits,
            absmax_bits,
            superblock_bits,
            total_bits,
            bits_per_parameter: if parameters == 0 {
                0.0
            } else {
                total_bits as f64 / parameters as f64
            },
        }
    }

    /// Sums several reports into one aggregate.
    pub fn aggregate<'a>(reports: impl IntoIterator<Item = &'a StorageReport>) -> Self {
        let (mut p, mut c, mut a, mut s) = (0, 0, 0, 0);
        for r in reports {
            p += r.parameters;
            c += r.code_bits;
            a += r.absmax_bits;
            s += r.superblock_bits;
        }
        Self::from_parts(p, c, a, s)
    }

    /// Closed-form bits per parameter for an element count and layout.
    pub fn predicted(parameters: u64, block_size: usize, double_quantize: bool, superblock: usize) -> Self {
        let n_blocks = parameters.div_ceil(block_size as u64);
        if double_quantize {
            let n_super = n_blocks.div_ceil(superblock as u64);
            Self::from_parts(parameters, 4 * parameters, 8 * n_blocks, 64 * n_super)
        } else {
            Self::from_parts(parameters, 4 * parameters, 32 * n_blocks, 0)
        }
    }

    /// Bytes the codes and constants occupy once serialized (codes padded
    /// to whole bytes).
    pub fn payload_bytes(&self) -> u64 {
        self.code_bits.div_ceil(8) + (self.absmax_bits + self.superblock_bits) / 8
    }
}

/// Packs 4-bit codes two per byte, earlier element in the low nibble.
pub fn pack_codes(codes: &[u8]) -> Vec<u8> {
    codes
        .chunks(2)
        .map(|c| (c[0] & 0xF) | (c.get(1).copied().unwrap_or(0) & 0xF) << 4)
        .collect()
}

/// Inverse of [`pack_codes`] for `len` codes.
pub fn unpack_codes(packed: &[u8], len: usize) -> Vec<u8> {
    (0..len)
        .map(|i| {
            let b = packed[i / 2];
            if i % 2 == 0 {
                b & 0xF
            } else {
                b >> 4
            }
        })
        .collect()
}

/// Quantizes with the default superblock size.
pub fn quantize_tensor(x: &Tensor, block_size: usize, double_quantize: bool) -> Result<QuantizedTensor> {
    quantize_tensor_with(x, block_size, double_quantize, DEFAULT_SUPERBLOCK)
}

pub fn quantize_tensor_with(
    x: &Tensor,
    block_size: usize,
    double_quantize: bool,
    superblock: usize,
) -> Result<QuantizedTensor> {
    if block_size == 0 {
        return Err(Error::config("block_size must be at least 1"));
    }
    if superblock == 0 {
        return Err(Error::config("superblock must be at least 1"));
    }
    if let Some(i) = x.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("element {i} is not finite")));
    }
    let book = nf4();
    let zero = book.zero_code();
    let mut codes = Vec::with_capacity(x.numel());
    let mut absmax = Vec::with_capacity(x.numel().div_ceil(block_size));
    for block in x.data().chunks(block_size) {
        let a = block.iter().fold(0f32, |m, v| m.max(v.abs()));
        absmax.push(a);
        if a == 0.0 {
            codes.extend(std::iter::repeat_n(zero, block.len()));
        } else {
            codes.extend(block.iter().map(|&v| book.nearest(v / a)));
        }
    }
    let absmax = if double_quantize {
        Absmax::double_quantize(&absmax, superblock)
    } else {
        Absmax::Full(absmax)
    };
    Ok(QuantizedTensor {
        shape: x.shape().to_vec(),
        len: x.numel(),
        block_size,
        packed: pack_codes(&codes),
        absmax,
    })
}

/// Reconstructs `codebook[code] · absmax_block` for every element.
pub fn dequantize_tensor(q: &QuantizedTensor) -> Result<Tensor> {
    q.validate()?;
    let book = nf4();
    let mut out = Vec::with_capacity(q.len);
    for (i, code) in unpack_codes(&q.packed, q.len).into_iter().enumerate() {
        let a = q.absmax.get(i / q.block_size);
        out.push(if a == 0.0 { 0.0 } else { book.value(code) * a });
    }
    Tensor::new(q.shape.clone(), out)
}

/// Exact bit accounting of the stored representation.
pub fn storage_report(q: &QuantizedTensor) -> StorageReport {
    let n = q.len as u64;
    let n_blocks = q.absmax.n_blocks() as u64;
    match &q.absmax {
        Absmax::Full(_) => StorageReport::from_parts(n, 4 * n, 32 * n_blocks, 0),
        Absmax::Double { mins, .. } => {
            StorageReport::from_parts(n, 4 * n, 8 * n_blocks, 64 * mins.len() as u64)
        }
    }
}

impl QuantizedTensor {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn packed(&self) -> &[u8] {
        &self.packed
    }

    pub fn absmax(&self) -> &Absmax {
        &self.absmax
    }

    pub fn is_double_quantized(&self) -> bool {
        matches!(self.absmax, Absmax::Double { .. })
    }

    pub fn codes(&self) -> Vec<u8> {
        unpack_codes(&self.packed, self.len)
    }

    fn validate(&self) -> Result<()> {
        if self.shape.iter().product::<usize>() != self.len {
            return Err(Error::Format("shape does not match element count".into()));
        }
        if self.packed.len() != self.len.div_ceil(2) {
            return Err(Error::Format(format!(
                "{} packed bytes for {} codes",
                self.packed.len(),
                self.len
            )));
        }
        if self.absmax.n_blocks() != self.len.div_ceil(self.block_size) {
            return Err(Error::Format("absmax count does not match block count".into()));
        }
        if let Absmax::Double {
            codes,
            superblock,
            mins,
            scales,
        } = &self.absmax
        {
            let n_super = codes.len().div_ceil(*superblock);
            if mins.len() != n_super || scales.len() != n_super {
                return Err(Error::Format("superblock constant count mismatch".into()));
            }
        }
        Ok(())
    }

    /// Serializes into the little-endian section layout: header, packed
    /// codes, then absmax constants.
    pub fn write_section(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.len as u64).to_le_bytes());
        out.extend_from_slice(&(self.block_size as u32).to_le_bytes());
        out.push(if self.is_double_quantized() {
            FLAG_DOUBLE_QUANTIZED
        } else {
            0
        });
        out.extend_from_slice(&self.packed);
        match &self.absmax {
            Absmax::Full(v) => v.iter().for_each(|a| out.extend_from_slice(&a.to_le_bytes())),
            Absmax::Double {
                codes, mins, scales, ..
            } => {
                out.extend_from_slice(codes);
                for (m, s) in mins.iter().zip(scales) {
                    out.extend_from_slice(&m.to_le_bytes());
                    out.extend_from_slice(&s.to_le_bytes());
                }
            }
        }
    }

    pub fn section_bytes(&self) -> Vec<u8> {
        let mut v = Vec::new();
        self.write_section(&mut v);
        v
    }

    /// Parses a section produced by [`write_section`](Self::write_section).
    /// The superblock size is not part of the section and must be supplied.
    pub fn read_section(bytes: &[u8], shape: Vec<usize>, superblock: usize) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let len = r.u64()? as usize;
        let block_size = r.u32()? as usize;
        let flags = r.u8()?;
        if block_size == 0 {
            return Err(Error::Format("block size 0".into()));
        }
        if flags & !FLAG_DOUBLE_QUANTIZED != 0 {
            return Err(Error::Format(format!("unknown flags {flags:#x}")));
        }
        if shape.iter().product::<usize>() != len {
            return Err(Error::Format(format!("shape {shape:?} does not hold {len} elements")));
        }
        let packed = r.take(len.div_ceil(2))?.to_vec();
        if len % 2 == 1 && packed.last().is_some_and(|b| b >> 4 != 0) {
            return Err(Error::Format("non-zero padding nibble".into()));
        }
        let n_blocks = len.div_ceil(block_size);
        let absmax = if flags & FLAG_DOUBLE_QUANTIZED != 0 {
            if superblock == 0 {
                return Err(Error::Format("superblock size 0".into()));
            }
            let codes = r.take(n_blocks)?.to_vec();
            let n_super = n_blocks.div_ceil(superblock);
            let mut mins = Vec::with_capacity(n_super);
            let mut scales = Vec::with_capacity(n_super);
            for _ in 0..n_super {
                mins.push(r.f32()?);
                scales.push(r.f32()?);
            }
            Absmax::Double {
                codes,
                superblock,
                mins,
                scales,
            }
        } else {
            Absmax::Full((0..n_blocks).map(|_| r.f32()).collect::<Result<_>>()?)
        };
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after quantized section",
                bytes.len() - r.pos
            )));
        }
        let q = Self {
            shape,
            len,
            block_size,
            packed,
            absmax,
        };
        q.validate()?;
        Ok(q)
    }
}

pub(crate) struct Reader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated: need {n} bytes at offset {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
