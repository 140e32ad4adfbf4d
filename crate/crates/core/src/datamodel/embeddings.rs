use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::SampleId;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"DVEM";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 24;

/// Row-major `n x d` float32 matrix whose rows are keyed by sample id.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    ids: Vec<SampleId>,
    dim: usize,
    data: Vec<f32>,
    normalized: bool,
}

impl EmbeddingMatrix {
    /// Builds a matrix, rejecting duplicate ids, ragged data and NaN/Inf.
    pub fn new(ids: Vec<SampleId>, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != ids.len() * dim {
            return Err(Error::InvalidParameter(format!(
                "{} values cannot form {} rows of dimension {}",
                data.len(),
                ids.len(),
                dim
            )));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for id in &ids {
            if !seen.insert(id) {
                return Err(Error::DuplicateSample(id.to_string()));
            }
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue {
                row: pos / dim.max(1),
                col: pos % dim.max(1),
            });
        }
        Ok(EmbeddingMatrix {
            ids,
            dim,
            data,
            normalized: false,
        })
    }

    pub fn from_rows(ids: Vec<SampleId>, rows: &[Vec<f32>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::InvalidParameter("rows have unequal length".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(ids, dim, data)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[SampleId] {
        &self.ids
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        (0..self.len()).map(move |i| self.row(i))
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn position(&self, id: &SampleId) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    /// Rows for `ids`, in that order. Keeps the normalization flag.
    pub fn select(&self, ids: &[SampleId]) -> Result<Self> {
        let pos: std::collections::HashMap<&SampleId, usize> =
            self.ids.iter().enumerate().map(|(i, id)| (id, i)).collect();
        let mut data = Vec::with_capacity(ids.len() * self.dim);
        for id in ids {
            let &i = pos
                .get(id)
                .ok_or_else(|| Error::MissingSample(id.to_string()))?;
            data.extend_from_slice(self.row(i));
        }
        let mut m = Self::new(ids.to_vec(), self.dim, data)?;
        m.normalized = self.normalized;
        Ok(m)
    }

    /// Scales every row to unit L2 norm. Norms are accumulated in f64.
    pub fn normalize_rows(mut self) -> Result<Self> {
        let dim = self.dim;
        for (i, row) in self.data.chunks_mut(dim.max(1)).enumerate() {
            let norm = row
                .iter()
                .map(|&v| f64::from(v) * f64::from(v))
                .sum::<f64>()
                .sqrt();
            if norm == 0.0 {
                return Err(Error::ZeroRow(self.ids[i].to_string()));
            }
            for v in row.iter_mut() {
                *v = (f64::from(*v) / norm) as f32;
            }
        }
        if dim == 0 && !self.ids.is_empty() {
            return Err(Error::ZeroRow(self.ids[0].to_string()));
        }
        self.normalized = true;
        Ok(self)
    }

    /// Checks the unit-norm invariant (tolerance 1e-4) and sets the flag.
    pub fn assume_normalized(mut self) -> Result<Self> {
        for row in self.rows() {
            let norm = row
                .iter()
                .map(|&v| f64::from(v) * f64::from(v))
                .sum::<f64>()
                .sqrt();
            if (norm - 1.0).abs() > 1e-4 {
                return Err(Error::NotNormalized);
            }
        }
        self.normalized = true;
        Ok(self)
    }
}

/// `<stem>.ids` next to a DVEM file.
pub fn ids_path(path: &Path) -> PathBuf {
    path.with_extension("ids")
}

pub fn save_embeddings(path: &Path, m: &EmbeddingMatrix) -> Result<()> {
    let mut buf = Vec::with_capacity(HEADER_LEN + m.data.len() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(m.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(m.dim as u32).to_le_bytes());
    buf.extend_from_slice(&0u32.to_le_bytes());
    for v in &m.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, &buf).map_err(|e| Error::io(path, e))?;

    let id_path = ids_path(path);
    let mut ids = Vec::new();
    for id in &m.ids {
        ids.write_all(id.as_str().as_bytes())
            .and_then(|_| ids.write_all(b"\n"))
            .map_err(|e| Error::io(&id_path, e))?;
    }
    fs::write(&id_path, ids).map_err(|e| Error::io(&id_path, e))
}

/// Reads a DVEM file and its `.ids` sidecar. The result is never flagged
/// as normalized; callers normalize or assert explicitly.
pub fn load_embeddings(path: &Path) -> Result<EmbeddingMatrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            expected: HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::MagicMismatch);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::VersionUnsupported(version));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let d = u32::from_le_bytes(bytes[16..20].try_into().unwrap());
    let expected = (HEADER_LEN as u64).saturating_add(n.saturating_mul(u64::from(d)).saturating_mul(4));
    if bytes.len() as u64 != expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len() as u64,
        });
    }

    let id_path = ids_path(path);
    let text = fs::read_to_string(&id_path).map_err(|e| Error::io(&id_path, e))?;
    let lines: Vec<&str> = text.lines().collect();
    if lines.len() as u64 != n {
        return Err(Error::IdCountMismatch {
            expected: n,
            found: lines.len() as u64,
        });
    }
    let ids = lines
        .into_iter()
        .map(SampleId::new)
        .collect::<Result<Vec<_>>>()?;

    let data: Vec<f32> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    EmbeddingMatrix::new(ids, d as usize, data)
}
