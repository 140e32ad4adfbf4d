//! Exact nearest-neighbor search by inner product over unit-normalized rows,
//! neighbor label votes, and entropy-based confidence.

pub mod kernel;
mod vote;

pub use vote::{entropy, predict_label, vote, LabelDistribution};
pub(crate) use vote::argmax;

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rayon::prelude::*;

use crate::datamodel::{EmbeddingMatrix, SampleId};
use crate::error::{Error, Result};
use kernel::ScoreFn;

const UNIT_TOL: f64 = 1e-4;
const QUERY_BLOCK: usize = 256;
const ROW_TILE: usize = 512;

#[derive(Clone, Debug, PartialEq)]
pub struct Neighbor {
    pub id: SampleId,
    /// Row of the neighbor in the index base matrix.
    pub row: usize,
    pub similarity: f64,
}

/// Neighbors ordered by similarity descending, then id ascending.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct NeighborList(pub Vec<Neighbor>);

impl NeighborList {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Neighbor> {
        self.0.iter()
    }

    pub fn ids(&self) -> impl Iterator<Item = &SampleId> {
        self.0.iter().map(|n| &n.id)
    }
}

/// Brute-force cosine index. Rows are widened to f64 once at build time.
pub struct KnnIndex {
    ids: Vec<SampleId>,
    /// Position of each row's id in ascending id order; the tie-break key.
    id_rank: Vec<u32>,
    dim: usize,
    /// Row stride of `base`: `dim` rounded up to whole SIMD lanes. The zero
    /// padding adds `+0.0` to lanes, which leaves every similarity unchanged.
    stride: usize,
    base: Vec<f64>,
    score: ScoreFn,
}

impl std::fmt::Debug for KnnIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KnnIndex")
            .field("len", &self.ids.len())
            .field("dim", &self.dim)
            .finish()
    }
}

impl KnnIndex {
    pub fn new(base: &EmbeddingMatrix) -> Result<Self> {
        if !base.is_normalized() {
            return Err(Error::NotNormalized);
        }
        let ids = base.ids().to_vec();
        let mut order: Vec<usize> = (0..ids.len()).collect();
        order.sort_by(|&a, &b| ids[a].cmp(&ids[b]));
        let mut id_rank = vec![0u32; ids.len()];
        for (rank, &row) in order.iter().enumerate() {
            id_rank[row] = rank as u32;
        }
        let dim = base.dim();
        let stride = dim.div_ceil(kernel::LANES) * kernel::LANES;
        Ok(KnnIndex {
            ids,
            id_rank,
            dim,
            stride,
            base: widen_padded(base.as_slice(), dim, stride),
            score: kernel::select_score_fn(),
        })
    }

    /// Forces the portable scalar kernel. Results are bit-identical either way.
    pub fn with_portable_kernel(mut self) -> Self {
        self.score = kernel::portable_score_fn();
        self
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

    fn check_query(&self, q: &[f32], k: usize) -> Result<()> {
        if self.ids.is_empty() {
            return Err(Error::EmptyIndex);
        }
        if k == 0 {
            return Err(Error::ZeroNeighbors);
        }
        if q.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                found: q.len(),
            });
        }
        let norm = q
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() || (norm - 1.0).abs() > UNIT_TOL {
            return Err(Error::QueryNotUnit(norm));
        }
        Ok(())
    }

    /// The `k` most similar base rows to a unit query (fewer if the index is
    /// smaller), ties broken by id ascending.
    pub fn query(&self, q: &[f32], k: usize) -> Result<NeighborList> {
        self.check_query(q, k)?;
        let widened = widen_padded(q, self.dim, self.stride);
        Ok(self.search_block(&widened, k).pop().unwrap())
    }

    /// Queries every row of a normalized matrix. Output order follows the
    /// input rows and does not depend on the rayon pool size.
    pub fn query_matrix(&self, queries: &EmbeddingMatrix, k: usize) -> Result<Vec<NeighborList>> {
        if !queries.is_normalized() {
            return Err(Error::NotNormalized);
        }
        if queries.is_empty() {
            return Ok(Vec::new());
        }
        for q in queries.rows() {
            self.check_query(q, k)?;
        }
        let widened = widen_padded(queries.as_slice(), self.dim, self.stride);
        let stride = self.stride.max(1);
        Ok(widened
            .par_chunks(QUERY_BLOCK * stride)
            .map(|block| self.search_block(block, k))
            .collect::<Vec<_>>()
            .into_iter()
            .flatten()
            .collect())
    }

    fn search_block(&self, queries: &[f64], k: usize) -> Vec<NeighborList> {
        let dim = self.stride;
        let n_queries = queries.len().checked_div(dim).unwrap_or(1);
        let k = k.min(self.ids.len());
        let mut heaps: Vec<TopK> = (0..n_queries).map(|_| TopK::new(k)).collect();
        let mut scores = vec![0.0; n_queries * ROW_TILE];
        let n = self.ids.len();
        let mut start = 0;
        while start < n {
            let end = (start + ROW_TILE).min(n);
            let width = end - start;
            let out = &mut scores[..n_queries * width];
            if dim == 0 {
                out.fill(0.0);
            } else {
                (self.score)(queries, &self.base[start * dim..end * dim], dim, out);
            }
            for (qi, heap) in heaps.iter_mut().enumerate() {
                heap.offer_tile(&out[qi * width..(qi + 1) * width], start, &self.id_rank);
            }
            start = end;
        }
        heaps
            .into_iter()
            .map(|h| {
                NeighborList(
                    h.into_sorted()
                        .into_iter()
                        .map(|c| Neighbor {
                            id: self.ids[c.row as usize].clone(),
                            row: c.row as usize,
                            similarity: c.sim,
                        })
                        .collect(),
                )
            })
            .collect()
    }
}

/// f32 rows of width `dim` to f64 rows of width `stride`, zero-filled.
fn widen_padded(data: &[f32], dim: usize, stride: usize) -> Vec<f64> {
    if dim == 0 {
        return Vec::new();
    }
    let mut out = vec![0.0f64; data.len() / dim * stride];
    for (src, dst) in data.chunks_exact(dim).zip(out.chunks_exact_mut(stride)) {
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = f64::from(s);
        }
    }
    out
}

#[derive(Clone, Copy, Debug)]
struct Candidate {
    sim: f64,
    rank: u32,
    row: u32,
}

impl Candidate {
    /// `Less` means `self` ranks ahead of `other`.
    fn rank_cmp(&self, other: &Self) -> Ordering {
        other
            .sim
            .total_cmp(&self.sim)
            .then(self.rank.cmp(&other.rank))
    }
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.rank_cmp(other) == Ordering::Equal
    }
}
impl Eq for Candidate {}
impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Candidate {
    // max-heap top is the worst retained candidate
    fn cmp(&self, other: &Self) -> Ordering {
        self.rank_cmp(other)
    }
}

struct TopK {
    k: usize,
    heap: BinaryHeap<Candidate>,
}

impl TopK {
    fn new(k: usize) -> Self {
        TopK {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    /// Offers `scores[j]` for rows `start + j`.
    #[inline]
    fn offer_tile(&mut self, scores: &[f64], start: usize, id_rank: &[u32]) {
        let mut floor = self.floor();
        for (off, &sim) in scores.iter().enumerate() {
            if sim < floor {
                continue;
            }
            let row = start + off;
            self.offer(Candidate {
                sim,
                rank: id_rank[row],
                row: row as u32,
            });
            floor = self.floor();
        }
    }

    /// Similarity below which nothing can enter the retained set.
    fn floor(&self) -> f64 {
        if self.heap.len() < self.k {
            f64::NEG_INFINITY
        } else {
            self.heap.peek().map_or(f64::NEG_INFINITY, |w| w.sim)
        }
    }

    #[inline]
    fn offer(&mut self, c: Candidate) {
        if self.heap.len() < self.k {
            self.heap.push(c);
        } else if let Some(worst) = self.heap.peek() {
            if c.sim > worst.sim || (c.sim == worst.sim && c.rank < worst.rank) {
                self.heap.pop();
                self.heap.push(c);
            }
        }
    }

    fn into_sorted(self) -> Vec<Candidate> {
        self.heap.into_sorted_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sid(s: &str) -> SampleId {
        SampleId::new(s).unwrap()
    }

    fn index(rows: &[(&str, Vec<f32>)]) -> KnnIndex {
        let ids = rows.iter().map(|(n, _)| sid(n)).collect();
        let data: Vec<Vec<f32>> = rows.iter().map(|(_, r)| r.clone()).collect();
        let m = EmbeddingMatrix::from_rows(ids, &data)
            .unwrap()
            .normalize_rows()
            .unwrap();
        KnnIndex::new(&m).unwrap()
    }

    #[test]
    fn self_match() {
        let idx = index(&[("a", vec![0.6, 0.8]), ("b", vec![1.0, 0.0]), ("c", vec![0.0, 1.0])]);
        let r = idx.query(&[0.6, 0.8], 1).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r.0[0].id, sid("a"));
        assert!((r.0[0].similarity - 1.0).abs() < 1e-6);
    }

    #[test]
    fn orthogonal_pair() {
        let idx = index(&[("x", vec![1.0, 0.0]), ("y", vec![0.0, 1.0])]);
        let r = idx.query(&[1.0, 0.0], 2).unwrap();
        let sims: Vec<f64> = r.iter().map(|n| n.similarity).collect();
        assert_eq!(sims, vec![1.0, 0.0]);
        assert_eq!(r.0[1].id, sid("y"));
    }

    #[test]
    fn ties_break_by_id() {
        let idx = index(&[("d", vec![1.0, 0.0]), ("b", vec![1.0, 0.0]), ("c", vec![1.0, 0.0])]);
        let r = idx.query(&[1.0, 0.0], 2).unwrap();
        let got: Vec<&str> = r.ids().map(SampleId::as_str).collect();
        assert_eq!(got, ["b", "c"]);
    }

    #[test]
    fn k_larger_than_base() {
        let idx = index(&[("a", vec![1.0, 0.0]), ("b", vec![0.0, 1.0])]);
        assert_eq!(idx.query(&[1.0, 0.0], 10).unwrap().len(), 2);
    }

    #[test]
    fn query_errors() {
        let idx = index(&[("a", vec![1.0, 0.0])]);
        assert!(matches!(idx.query(&[1.0, 0.0, 0.0], 1), Err(Error::DimMismatch { .. })));
        assert!(matches!(idx.query(&[2.0, 0.0], 1), Err(Error::QueryNotUnit(_))));
        assert!(matches!(idx.query(&[1.0, 0.0], 0), Err(Error::ZeroNeighbors)));
        let empty = EmbeddingMatrix::new(vec![], 2, vec![]).unwrap().normalize_rows().unwrap();
        let e = KnnIndex::new(&empty).unwrap();
        assert!(matches!(e.query(&[1.0, 0.0], 1), Err(Error::EmptyIndex)));
        let raw = EmbeddingMatrix::from_rows(vec![sid("a")], &[vec![1.0]]).unwrap();
        assert!(matches!(KnnIndex::new(&raw), Err(Error::NotNormalized)));
    }
}
