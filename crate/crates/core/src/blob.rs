//! `SEMB` binary blobs: a 16-byte header followed by `count * dim`
//! little-endian `f32` values, record-major.
//!
//! ```text
//! offset 0   b"SEMB"
//! offset 4   u32 LE version (= 1)
//! offset 8   u32 LE count
//! offset 12  u32 LE dim
//! offset 16  count * dim f32 LE
//! ```
//!
//! A blob is read back as a `count x dim` [`Matrix`]. Values are widened to
//! `f64` on read, so anything that went through a blob is exactly
//! representable in `f32`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const MAGIC: [u8; 4] = *b"SEMB";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlobHeader {
    pub version: u32,
    pub count: u32,
    pub dim: u32,
}

/// Rounds every entry to the nearest `f32`, which is what a blob stores.
pub fn quantize(m: &Matrix) -> Matrix {
    let data = m.as_slice().iter().map(|&v| v as f32 as f64).collect();
    Matrix::from_raw_unchecked(m.rows(), m.cols(), data)
}

pub fn encode(m: &Matrix) -> Result<Vec<u8>> {
    let count = u32::try_from(m.rows())
        .map_err(|_| Error::Parameter(format!("{} rows exceed the blob limit", m.rows())))?;
    let dim = u32::try_from(m.cols())
        .map_err(|_| Error::Parameter(format!("{} columns exceed the blob limit", m.cols())))?;
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * m.as_slice().len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&dim.to_le_bytes());
    for &v in m.as_slice() {
        let f = v as f32;
        if !f.is_finite() {
            return Err(Error::NonFinite(format!("{v} overflows f32 storage")));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_header(bytes: &[u8]) -> Result<BlobHeader> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!(
            "blob is {} bytes, shorter than the {HEADER_LEN}-byte header",
            bytes.len()
        )));
    }
    if bytes[..4] != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected \"SEMB\"",
            String::from_utf8_lossy(&bytes[..4])
        )));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let header = BlobHeader {
        version: word(4),
        count: word(8),
        dim: word(12),
    };
    if header.version != VERSION {
        return Err(Error::Format(format!(
            "unsupported blob version {} (expected {VERSION})",
            header.version
        )));
    }
    Ok(header)
}

pub fn decode(bytes: &[u8]) -> Result<Matrix> {
    let header = decode_header(bytes)?;
    let (count, dim) = (header.count as usize, header.dim as usize);
    let payload = (count as u64) * (dim as u64) * 4;
    let actual = (bytes.len() - HEADER_LEN) as u64;
    if payload != actual {
        return Err(Error::Format(format!(
            "header declares {count}x{dim} values ({payload} bytes) but payload holds {actual} bytes"
        )));
    }
    if count == 0 || dim == 0 {
        return Err(Error::Format(format!("blob shape {count}x{dim} is empty")));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Matrix::new(count, dim, data).map_err(|e| Error::Validation(e.to_string()))
}

pub fn write(path: &Path, m: &Matrix) -> Result<()> {
    let bytes = encode(m)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Matrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
