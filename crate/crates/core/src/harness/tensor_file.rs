//! `OVQT` tensor files.
//!
//! Layout, all little-endian:
//!
//! | offset | size      | field                         |
//! |--------|-----------|-------------------------------|
//! | 0      | 4         | magic `OVQT`                  |
//! | 4      | 2         | version (`1`)                 |
//! | 6      | 2         | dtype tag (`1` = f32)         |
//! | 8      | 2         | rank                          |
//! | 10     | 4 * rank  | dims, `u32` each              |
//! | ...    | 4 * numel | payload, `f32`, row-major     |

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"OVQT";
pub const VERSION: u16 = 1;
pub const DTYPE_F32: u16 = 1;

/// Dense row-major f32 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::LengthMismatch {
                expected,
                actual: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Tensor::new(shape, data.iter().map(|&v| v as f32).collect())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Last dimension, i.e. the channel count of a channels-last tensor.
    pub fn channels(&self) -> usize {
        self.shape.last().copied().unwrap_or(0)
    }

    /// Bit-level equality (distinguishes `-0.0` and NaN payloads).
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

pub fn encode_tensor(t: &Tensor) -> Result<Vec<u8>> {
    let rank = u16::try_from(t.shape.len())
        .map_err(|_| Error::Header(format!("rank {} too large", t.shape.len())))?;
    let mut out = Vec::with_capacity(10 + 4 * t.shape.len() + 4 * t.data.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&DTYPE_F32.to_le_bytes());
    out.extend_from_slice(&rank.to_le_bytes());
    for &d in &t.shape {
        let d = u32::try_from(d).map_err(|_| Error::Header(format!("dim {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let header = |msg: String| Error::Header(msg);
    let take = |at: usize, len: usize| {
        bytes.get(at..at + len).ok_or_else(|| {
            header(format!(
                "truncated: need {} bytes, have {}",
                at + len,
                bytes.len()
            ))
        })
    };
    let u16_at = |at| take(at, 2).map(|b| u16::from_le_bytes([b[0], b[1]]));

    if take(0, 4)? != MAGIC {
        return Err(header(format!("bad magic {:?}", &bytes[..4])));
    }
    let version = u16_at(4)?;
    if version != VERSION {
        return Err(header(format!("unsupported version {version}")));
    }
    let dtype = u16_at(6)?;
    if dtype != DTYPE_F32 {
        return Err(header(format!("unsupported dtype tag {dtype}")));
    }
    let rank = u16_at(8)? as usize;
    let dims = take(10, 4 * rank)?;
    let shape: Vec<usize> = dims
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| header("element count overflows".into()))?;
    let start = 10 + 4 * rank;
    let payload = &bytes[start..];
    if Some(payload.len()) != numel.checked_mul(4) {
        return Err(header(format!(
            "payload is {} bytes, dims {shape:?} need {}",
            payload.len(),
            numel.saturating_mul(4)
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Tensor { shape, data })
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_tensor(t)?).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes)
}
