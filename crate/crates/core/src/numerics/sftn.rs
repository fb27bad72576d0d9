//! Raw tensor files.
//!
//! Layout: magic `SFTN`, u32 rank, `rank` u32 dims, then row-major f32 data,
//! all little-endian. A matrix (rank 2) therefore has a 16-byte header.

use std::fs;
use std::path::Path;

use super::Matrix;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SFTN";
const MAX_RANK: u32 = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn vector(data: Vec<f32>) -> Self {
        Self {
            dims: vec![data.len()],
            data,
        }
    }

    /// Rank-1 tensors become a single row; rank-2 keep their shape.
    pub fn into_matrix(self) -> Result<Matrix> {
        match self.dims.as_slice() {
            [n] => Matrix::from_vec(1, *n, self.data),
            [r, c] => Matrix::from_vec(*r, *c, self.data),
            dims => Err(Error::Input(format!(
                "expected a rank-1 or rank-2 tensor, got dims {dims:?}"
            ))),
        }
    }
}

impl From<&Matrix> for Tensor {
    fn from(m: &Matrix) -> Self {
        Self {
            dims: vec![m.rows(), m.cols()],
            data: m.as_slice().to_vec(),
        }
    }
}

pub fn encode(tensor: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * tensor.dims.len() + 4 * tensor.data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(tensor.dims.len() as u32).to_le_bytes());
    for &d in &tensor.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in &tensor.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes a buffer; `origin` is only used to label errors.
pub fn decode(bytes: &[u8], origin: &Path) -> Result<Tensor> {
    let word = |at: usize| -> Result<u32> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| Error::format(origin, format!("truncated header at byte {at}")))
    };
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::format(origin, "missing SFTN magic"));
    }
    let rank = word(4)?;
    if rank > MAX_RANK {
        return Err(Error::format(origin, format!("rank {rank} too large")));
    }
    let dims = (0..rank as usize)
        .map(|i| word(8 + 4 * i).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let header = 8 + 4 * rank as usize;
    let count: usize = dims.iter().product();
    let expected = header + 4 * count;
    if bytes.len() != expected {
        return Err(Error::format(
            origin,
            format!(
                "expected {expected} bytes for dims {dims:?}, found {}",
                bytes.len()
            ),
        ));
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(Tensor { dims, data })
}

pub fn write(path: &Path, tensor: &Tensor) -> Result<()> {
    fs::write(path, encode(tensor)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub fn write_matrix(path: &Path, m: &Matrix) -> Result<()> {
    write(path, &Tensor::from(m))
}

pub fn read_matrix(path: &Path) -> Result<Matrix> {
    read(path)?.into_matrix()
}
