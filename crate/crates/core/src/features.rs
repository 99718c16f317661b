//! Per-utterance feature matrices and their on-disk cache format.
//!
//! Cache layout (all little-endian):
//!
//! | bytes | field            |
//! |-------|------------------|
//! | 4     | magic `LFCC`     |
//! | 4     | version (u32)    |
//! | 4     | n_frames (u32)   |
//! | 4     | n_dims (u32)     |
//! | 4·n   | row-major f32    |

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

pub const CACHE_MAGIC: &[u8; 4] = b"LFCC";
pub const CACHE_VERSION: u32 = 1;

/// Frames × coefficient dims. Always at least one frame, every value finite.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    data: Array2<f64>,
}

impl FeatureMatrix {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if data.nrows() == 0 {
            return Err(Error::InvalidInput("feature matrix has no frames".into()));
        }
        if data.ncols() == 0 {
            return Err(Error::InvalidInput("feature matrix has no dims".into()));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            let (r, c) = (pos / data.ncols(), pos % data.ncols());
            return Err(Error::NonFinite(format!("feature value at frame {r}, dim {c}")));
        }
        Ok(Self { data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_dims = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_dims) {
            return Err(Error::Shape("ragged feature rows".into()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let data = Array2::from_shape_vec((rows.len(), n_dims), flat)
            .map_err(|e| Error::Shape(e.to_string()))?;
        Self::new(data)
    }

    pub fn n_frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_dims(&self) -> usize {
        self.data.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn frame(&self, t: usize) -> ArrayView1<'_, f64> {
        self.data.row(t)
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.data
    }

    /// Serialize into the cache layout. Values are narrowed to f32.
    pub fn to_cache_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.data.len());
        out.extend_from_slice(CACHE_MAGIC);
        out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.n_frames() as u32).to_le_bytes());
        out.extend_from_slice(&(self.n_dims() as u32).to_le_bytes());
        for v in self.data.iter() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_cache_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Cache(format!("truncated header ({} bytes)", bytes.len())));
        }
        if &bytes[..4] != CACHE_MAGIC {
            return Err(Error::Cache("bad magic, expected LFCC".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let version = word(4);
        if version != CACHE_VERSION {
            return Err(Error::Cache(format!("unsupported version {version}")));
        }
        let (n_frames, n_dims) = (word(8) as usize, word(12) as usize);
        let expected = 16 + 4 * n_frames * n_dims;
        if bytes.len() != expected {
            return Err(Error::Cache(format!(
                "payload size {} does not match {n_frames}x{n_dims} header",
                bytes.len()
            )));
        }
        let values: Vec<f64> = bytes[16..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let data = Array2::from_shape_vec((n_frames, n_dims), values)
            .map_err(|e| Error::Cache(e.to_string()))?;
        Self::new(data)
    }

    pub fn write_cache(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_cache_bytes())?;
        Ok(())
    }

    pub fn read_cache(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)
            .map_err(|e| Error::Cache(format!("{}: {e}", path.display())))?;
        Self::from_cache_bytes(&bytes)
    }
}
