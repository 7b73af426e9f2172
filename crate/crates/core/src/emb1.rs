//! Reader and writer for the `EMB1` little-endian matrix layout.
//!
//! Layout: the four magic bytes `EMB1`, a `u32` row count, a `u32` row
//! dimension, then `rows * dim` IEEE-754 `f32` values in row-major order.
//! Everything is little-endian. Corpora, PCA bases and probe models all
//! share this layout and differ only in the JSON sidecar written next to it.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"EMB1";
const HEADER_LEN: usize = 12;

#[derive(Debug, Error)]
pub enum Emb1Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("not an EMB1 file (bad magic bytes)")]
    BadMagic,
    #[error("EMB1 header truncated ({0} bytes)")]
    TruncatedHeader(usize),
    #[error("EMB1 payload holds {found} bytes, header promises {expected}")]
    PayloadLength { expected: usize, found: usize },
    #[error("EMB1 dimension is zero")]
    ZeroDimension,
    #[error("matrix buffer of {len} values does not fill {rows} rows of dimension {dim}")]
    Shape { rows: usize, dim: usize, len: usize },
}

/// A dense row-major `f32` matrix as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Emb1Matrix {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl Emb1Matrix {
    pub fn new(rows: usize, dim: usize, data: Vec<f32>) -> Result<Self, Emb1Error> {
        if dim == 0 {
            return Err(Emb1Error::ZeroDimension);
        }
        if rows * dim != data.len() {
            return Err(Emb1Error::Shape {
                rows,
                dim,
                len: data.len(),
            });
        }
        Ok(Self { rows, dim, data })
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, Emb1Error> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Emb1Error::BadMagic);
        }
        if bytes.len() < HEADER_LEN {
            return Err(Emb1Error::TruncatedHeader(bytes.len()));
        }
        let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if dim == 0 {
            return Err(Emb1Error::ZeroDimension);
        }
        let payload = &bytes[HEADER_LEN..];
        let expected = rows * dim * 4;
        if payload.len() != expected {
            return Err(Emb1Error::PayloadLength {
                expected,
                found: payload.len(),
            });
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { rows, dim, data })
    }

    pub fn write(&self, path: &Path) -> Result<(), Emb1Error> {
        fs::write(path, self.encode()).map_err(|source| Emb1Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn read(path: &Path) -> Result<Self, Emb1Error> {
        let bytes = fs::read(path).map_err(|source| Emb1Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::decode(&bytes)
    }
}

/// `path` with `suffix` appended to the full file name (`a.emb` -> `a.emb.meta.jsonl`).
pub fn sidecar_path(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.as_os_str().to_os_string();
    name.push(suffix);
    PathBuf::from(name)
}
