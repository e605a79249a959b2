//! Block-wise 4-bit weight quantisation.
//!
//! A tensor is flattened row-major and cut into blocks of `block_size`
//! values (the last block may be shorter). Each block stores its absmax as an
//! FP32 scale and one 4-bit code per value indexing a 16-level codebook on
//! [-1, 1]. Two codebooks are provided: NF4, whose levels are normal
//! quantiles, and an evenly spaced baseline.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const DEFAULT_BLOCK_SIZE: usize = 64;
pub const LEVELS: usize = 16;

/// Probability mass at which the outermost NF4 level sits before
/// normalisation; matches the reference NF4 construction.
const NF4_OFFSET: f64 = 0.967_708_3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodebookId {
    Nf4,
    Uniform4,
}

impl CodebookId {
    pub fn levels(self) -> [f32; LEVELS] {
        match self {
            CodebookId::Nf4 => build_nf4_codebook().values,
            CodebookId::Uniform4 => uniform4_levels(),
        }
    }

    /// Code used for all-zero blocks: the level closest to 0.
    pub fn zero_code(self) -> u8 {
        nearest_level(&self.levels(), 0.0)
    }
}

/// Sixteen strictly increasing levels from -1 to 1, including 0.
#[derive(Clone, Debug, PartialEq)]
pub struct Nf4Codebook {
    pub values: [f32; LEVELS],
}

/// NF4 levels: 7 negative and 8 positive standard-normal quantiles taken at
/// evenly spaced probabilities between 1/2 and `NF4_OFFSET`, plus an exact
/// zero, scaled so the extremes are ±1.
pub fn build_nf4_codebook() -> Nf4Codebook {
    let normal = Normal::standard();
    let ppf = |p: f64| normal.inverse_cdf(p);
    let spaced = |count: usize| -> Vec<f64> {
        // `count` evenly spaced probabilities from NF4_OFFSET down to 0.5,
        // dropping the final 0.5.
        (0..count - 1)
            .map(|i| NF4_OFFSET + (0.5 - NF4_OFFSET) * i as f64 / (count - 1) as f64)
            .collect()
    };
    let mut levels: Vec<f64> = spaced(9).into_iter().map(ppf).collect();
    levels.extend(spaced(8).into_iter().map(|p| -ppf(p)));
    levels.push(0.0);
    levels.sort_by(|a, b| a.partial_cmp(b).expect("finite quantiles"));
    let max = levels.iter().copied().fold(f64::MIN, f64::max);
    let mut values = [0.0f32; LEVELS];
    for (v, l) in values.iter_mut().zip(&levels) {
        *v = (l / max) as f32;
    }
    Nf4Codebook { values }
}

/// `-1 + 2i/15` for `i` in `0..16`.
pub fn uniform4_levels() -> [f32; LEVELS] {
    let mut values = [0.0f32; LEVELS];
    for (i, v) in values.iter_mut().enumerate() {
        *v = (-1.0 + 2.0 * i as f64 / 15.0) as f32;
    }
    values
}

/// Nearest level index; equidistant candidates resolve to the lower index.
pub fn nearest_level(levels: &[f32; LEVELS], v: f32) -> u8 {
    let mut best = 0;
    let mut best_dist = (v - levels[0]).abs();
    for (i, &l) in levels.iter().enumerate().skip(1) {
        let d = (v - l).abs();
        if d < best_dist {
            best = i;
            best_dist = d;
        }
    }
    best as u8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizedTensor {
    shape: Vec<usize>,
    block_size: usize,
    /// Two codes per byte, low nibble first.
    codes: Vec<u8>,
    scales: Vec<f32>,
    codebook: CodebookId,
}

impl QuantizedTensor {
    /// Builds from unpacked codes, validating every structural invariant.
    pub fn from_codes(
        shape: &[usize],
        block_size: usize,
        codes: &[u8],
        scales: Vec<f32>,
        codebook: CodebookId,
    ) -> Result<Self> {
        if let Some(i) = codes.iter().position(|&c| c as usize >= LEVELS) {
            return Err(Error::Format(format!("code {} at index {i} exceeds 15", codes[i])));
        }
        let mut packed = vec![0u8; codes.len().div_ceil(2)];
        for (i, &c) in codes.iter().enumerate() {
            packed[i / 2] |= c << (4 * (i % 2));
        }
        let q = Self {
            shape: shape.to_vec(),
            block_size,
            codes: packed,
            scales,
            codebook,
        };
        q.validate()?;
        if codes.len() != q.numel() {
            return Err(Error::Format(format!("{} codes for {} values", codes.len(), q.numel())));
        }
        Ok(q)
    }

    pub fn validate(&self) -> Result<()> {
        if self.shape.is_empty() || self.shape.contains(&0) {
            return Err(Error::Format(format!("invalid shape {:?}", self.shape)));
        }
        if self.block_size == 0 {
            return Err(Error::Format("block size must be positive".into()));
        }
        let numel = self.numel();
        if self.codes.len() != numel.div_ceil(2) {
            return Err(Error::Format(format!(
                "{} code bytes for {numel} values",
                self.codes.len()
            )));
        }
        if self.scales.len() != numel.div_ceil(self.block_size) {
            return Err(Error::Format(format!(
                "{} scales for {} blocks",
                self.scales.len(),
                numel.div_ceil(self.block_size)
            )));
        }
        if let Some(i) = self.scales.iter().position(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::Format(format!("invalid scale {} for block {i}", self.scales[i])));
        }
        Ok(())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn codebook(&self) -> CodebookId {
        self.codebook
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    pub fn packed_codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn code(&self, i: usize) -> u8 {
        (self.codes[i / 2] >> (4 * (i % 2))) & 0x0f
    }

    pub fn codes(&self) -> Vec<u8> {
        (0..self.numel()).map(|i| self.code(i)).collect()
    }

    /// Serialized form: packed codes followed by little-endian FP32 scales.
    pub fn payload(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.codes.len() + 4 * self.scales.len());
        out.extend_from_slice(&self.codes);
        for s in &self.scales {
            out.extend_from_slice(&s.to_le_bytes());
        }
        out
    }

    pub fn payload_len(numel: usize, block_size: usize) -> usize {
        numel.div_ceil(2) + 4 * numel.div_ceil(block_size)
    }

    pub fn from_payload(shape: &[usize], block_size: usize, codebook: CodebookId, bytes: &[u8]) -> Result<Self> {
        if block_size == 0 || shape.is_empty() || shape.contains(&0) {
            return Err(Error::Format("invalid quantised header".into()));
        }
        let numel: usize = shape.iter().product();
        if bytes.len() != Self::payload_len(numel, block_size) {
            return Err(Error::Format(format!(
                "payload of {} bytes, expected {}",
                bytes.len(),
                Self::payload_len(numel, block_size)
            )));
        }
        let (codes, scale_bytes) = bytes.split_at(numel.div_ceil(2));
        if numel % 2 == 1 && codes[codes.len() - 1] >> 4 != 0 {
            return Err(Error::Format("non-zero padding nibble".into()));
        }
        let scales = scale_bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let q = Self {
            shape: shape.to_vec(),
            block_size,
            codes: codes.to_vec(),
            scales,
            codebook,
        };
        q.validate()?;
        Ok(q)
    }
}

/// Absmax block quantisation onto `codebook`.
pub fn quantize_blockwise(w: &Tensor, block_size: usize, codebook: CodebookId) -> Result<QuantizedTensor> {
    if block_size == 0 {
        return Err(Error::Config {
            field: "block_size".into(),
            reason: "must be at least 1".into(),
        });
    }
    if let Some(index) = w.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput { index });
    }
    let levels = codebook.levels();
    let zero = codebook.zero_code();
    let mut codes = Vec::with_capacity(w.numel());
    let mut scales = Vec::with_capacity(w.numel().div_ceil(block_size));
    for block in w.data().chunks(block_size) {
        let scale = block.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        scales.push(scale);
        if scale == 0.0 {
            codes.extend(std::iter::repeat_n(zero, block.len()));
        } else {
            codes.extend(block.iter().map(|&v| nearest_level(&levels, v / scale)));
        }
    }
    QuantizedTensor::from_codes(w.shape(), block_size, &codes, scales, codebook)
}

pub fn quantize_nf4(w: &Tensor, block_size: usize) -> Result<QuantizedTensor> {
    quantize_blockwise(w, block_size, CodebookId::Nf4)
}

pub fn quantize_uniform4(w: &Tensor, block_size: usize) -> Result<QuantizedTensor> {
    quantize_blockwise(w, block_size, CodebookId::Uniform4)
}

/// `codebook[code] × scale` for every value.
pub fn dequantize(q: &QuantizedTensor) -> Result<Tensor> {
    q.validate()?;
    let levels = q.codebook.levels();
    let data = (0..q.numel())
        .map(|i| levels[q.code(i) as usize] * q.scales[i / q.block_size])
        .collect();
    Tensor::new(&q.shape, data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantReport {
    pub bits_per_weight: f32,
    pub compression_ratio_vs_fp32: f32,
    pub rmse: f32,
    pub max_abs_err: f32,
}

/// Storage cost of one weight: a 4-bit code plus its share of an FP32 scale.
pub fn bits_per_weight(block_size: usize) -> f32 {
    4.0 + 32.0 / block_size as f32
}

pub fn measure(q: &QuantizedTensor, original: &Tensor) -> Result<QuantReport> {
    if q.shape() != original.shape() {
        return Err(Error::shape("measure", q.shape(), original.shape()));
    }
    let restored = dequantize(q)?;
    let mut sq = 0.0f64;
    let mut max_abs_err = 0.0f32;
    for (a, b) in restored.data().iter().zip(original.data()) {
        let e = (a - b).abs();
        sq += (e as f64) * (e as f64);
        max_abs_err = max_abs_err.max(e);
    }
    let bits = bits_per_weight(q.block_size());
    Ok(QuantReport {
        bits_per_weight: bits,
        compression_ratio_vs_fp32: 32.0 / bits,
        rmse: (sq / original.numel() as f64).sqrt() as f32,
        max_abs_err,
    })
}
