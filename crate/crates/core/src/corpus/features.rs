//! Binary feature files: `AVMS`, u16 version, u32 rows, u32 cols, then
//! row-major little-endian `f32` values.

use std::fs;
use std::path::Path;

use super::CorpusError;

pub const FEATURE_MAGIC: &[u8; 4] = b"AVMS";
pub const FEATURE_VERSION: u16 = 1;
pub const FEATURE_HEADER_LEN: usize = 14;

/// A `T x D` stream of per-frame features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, CorpusError> {
        if rows * cols != data.len() {
            return Err(CorpusError::Shape(format!(
                "{rows}x{cols} matrix given {} values",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Mean of squared values.
    pub fn power(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / self.data.len() as f64
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(FEATURE_HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.cols as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CorpusError> {
        if bytes.len() < FEATURE_HEADER_LEN {
            return Err(CorpusError::Truncated {
                expected: FEATURE_HEADER_LEN,
                actual: bytes.len(),
            });
        }
        if &bytes[..4] != FEATURE_MAGIC {
            return Err(CorpusError::BadMagic);
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != FEATURE_VERSION {
            return Err(CorpusError::UnsupportedVersion(version));
        }
        let rows = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
        let cols = u32::from_le_bytes(bytes[10..14].try_into().expect("4 bytes")) as usize;
        let expected = FEATURE_HEADER_LEN + rows * cols * 4;
        if bytes.len() != expected {
            return Err(CorpusError::Truncated {
                expected,
                actual: bytes.len(),
            });
        }
        let data = bytes[FEATURE_HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Self { rows, cols, data })
    }
}

pub fn write_features(path: &Path, matrix: &FeatureMatrix) -> Result<(), CorpusError> {
    fs::write(path, matrix.to_bytes()).map_err(|e| CorpusError::io(path, e))
}

pub fn read_features(path: &Path) -> Result<FeatureMatrix, CorpusError> {
    let bytes = fs::read(path).map_err(|e| CorpusError::io(path, e))?;
    FeatureMatrix::from_bytes(&bytes)
}
