//! Binary tensor files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! b"MICN" | version: u16 | rank: u32 | dims: rank × u32 | payload: f32 × ∏dims
//! ```
//!
//! Values are computed in f64 and narrowed to f32 (round to nearest) on save.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"MICN";
pub const VERSION: u16 = 1;

const HEADER: usize = 4 + 2 + 4;

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

fn take<'a>(bytes: &'a [u8], at: usize, n: usize, what: &'static str) -> Result<&'a [u8]> {
    bytes.get(at..at + n).ok_or(Error::Truncated {
        what,
        expected: at + n,
        actual: bytes.len(),
    })
}

fn u32_at(bytes: &[u8], at: usize, what: &'static str) -> Result<u32> {
    let b = take(bytes, at, 4, what)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let magic = take(bytes, 0, 4, "header")?;
    if magic != MAGIC {
        return Err(Error::BadMagic([magic[0], magic[1], magic[2], magic[3]]));
    }
    let v = take(bytes, 4, 2, "header")?;
    let version = u16::from_le_bytes([v[0], v[1]]);
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let rank = u32_at(bytes, 6, "header")? as usize;
    if rank > (bytes.len().saturating_sub(HEADER)) / 4 {
        return Err(Error::Truncated {
            what: "dims",
            expected: HEADER + 4 * rank,
            actual: bytes.len(),
        });
    }
    let dims: Vec<u32> = (0..rank)
        .map(|k| u32_at(bytes, HEADER + 4 * k, "dims"))
        .collect::<Result<_>>()?;
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
        .and_then(|n| n.checked_mul(4).map(|_| n))
        .ok_or_else(|| Error::DimOverflow(dims.clone()))?;
    let start = HEADER + 4 * rank;
    let expected = start
        .checked_add(count * 4)
        .ok_or_else(|| Error::DimOverflow(dims.clone()))?;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            what: "payload",
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::TrailingBytes {
            expected,
            actual: bytes.len() - expected,
        });
    }
    let data = bytes[start..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    Tensor::new(dims.iter().map(|&d| d as usize).collect(), data)
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode_tensor(t)).map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes).map_err(|e| match e {
        Error::InvalidTensor { .. } => Error::malformed(path, e.to_string()),
        other => other,
    })
}
