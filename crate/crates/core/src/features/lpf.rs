//! LPF1 tensor files.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "LPF1"
//! 4       2     format version (u16 LE, currently 1)
//! 6       2     layer index (u16 LE, 1-based)
//! 8       8     rows N (u64 LE)
//! 16      8     cols d (u64 LE)
//! 24      4*N*d f32 LE, row-major
//! ```
//!
//! The checksum of a file is the SHA-256 of all of its bytes.

use std::path::Path;

use crate::corpus::sha256_hex;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const MAGIC: &[u8; 4] = b"LPF1";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 24;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerMatrix {
    pub layer: u16,
    pub data: Matrix<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LpfHeader {
    pub version: u16,
    pub layer: u16,
    pub rows: u64,
    pub cols: u64,
}

pub fn encode(layer: u16, matrix: &Matrix<f32>) -> Result<Vec<u8>> {
    if let Some(pos) = matrix.data().iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!(
            "layer {layer} row {} col {}",
            pos / matrix.cols().max(1),
            pos % matrix.cols().max(1)
        )));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * matrix.data().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&layer.to_le_bytes());
    out.extend_from_slice(&(matrix.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(matrix.cols() as u64).to_le_bytes());
    for x in matrix.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_header(bytes: &[u8]) -> Result<LpfHeader> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!("{} bytes, shorter than the header", bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &bytes[0..4])));
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let header = LpfHeader {
        version: u16_at(4),
        layer: u16_at(6),
        rows: u64_at(8),
        cols: u64_at(16),
    };
    if header.version != VERSION {
        return Err(Error::Format(format!("unsupported version {}", header.version)));
    }
    Ok(header)
}

pub fn decode(bytes: &[u8]) -> Result<LayerMatrix> {
    let header = decode_header(bytes)?;
    let expected = header
        .rows
        .checked_mul(header.cols)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER_LEN as u64))
        .ok_or_else(|| Error::Format("dimensions overflow".into()))?;
    if expected != bytes.len() as u64 {
        return Err(Error::Format(format!(
            "header declares {}x{} ({expected} bytes), file has {} bytes",
            header.rows,
            header.cols,
            bytes.len()
        )));
    }
    let data: Vec<f32> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if data.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("layer {} payload", header.layer)));
    }
    Ok(LayerMatrix {
        layer: header.layer,
        data: Matrix::new(header.rows as usize, header.cols as usize, data)?,
    })
}

/// Writes `matrix` as an LPF1 file and returns the file's SHA-256 (hex).
pub fn write_layer_matrix(path: &Path, layer: u16, matrix: &Matrix<f32>) -> Result<String> {
    if layer == 0 {
        return Err(Error::Precondition("layer indices are 1-based".into()));
    }
    let bytes = encode(layer, matrix)?;
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn read_layer_matrix(path: &Path) -> Result<LayerMatrix> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
