//! Inner-product kernel.
//!
//! The similarity of two vectors is defined with a fixed summation order so
//! that every code path (scalar, SIMD, single or batched query) produces the
//! same bits: element `i` is accumulated into lane `i % 8` in increasing `i`,
//! then the lanes are combined as `((l0+l1)+(l2+l3)) + ((l4+l5)+(l6+l7))`.
//! Inputs are f32 values widened to f64, so every product is exact and a
//! fused multiply-add yields the same result as a separate multiply and add.

pub const LANES: usize = 8;

macro_rules! dot_body {
    ($a:expr, $b:expr, $madd:expr) => {{
        let a: &[f64] = $a;
        let b: &[f64] = $b;
        debug_assert_eq!(a.len(), b.len());
        let mut acc = [0.0f64; LANES];
        let ca = a.chunks_exact(LANES);
        let cb = b.chunks_exact(LANES);
        let (ra, rb) = (ca.remainder(), cb.remainder());
        for (x, y) in ca.zip(cb) {
            for j in 0..LANES {
                acc[j] = $madd(x[j], y[j], acc[j]);
            }
        }
        for j in 0..ra.len() {
            acc[j] = $madd(ra[j], rb[j], acc[j]);
        }
        let s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
        // -0.0 never survives, keeps total ordering equal to numeric ordering
        s + 0.0
    }};
}

#[inline(always)]
fn madd_plain(x: f64, y: f64, acc: f64) -> f64 {
    acc + x * y
}

#[inline(always)]
#[cfg_attr(not(target_arch = "x86_64"), allow(dead_code))]
fn madd_fused(x: f64, y: f64, acc: f64) -> f64 {
    x.mul_add(y, acc)
}

#[inline(always)]
fn dot_plain(a: &[f64], b: &[f64]) -> f64 {
    dot_body!(a, b, madd_plain)
}

/// Similarity of two widened vectors using the portable path.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    dot_plain(a, b)
}

/// Scores `queries x rows` into `out` (row-major by query), where both
/// inputs are flat `dim`-strided buffers.
pub type ScoreFn = fn(&[f64], &[f64], usize, &mut [f64]);

fn score_block_plain(queries: &[f64], rows: &[f64], dim: usize, out: &mut [f64]) {
    score_block_generic(queries, rows, dim, out, dot_plain)
}

fn score_block_generic(
    queries: &[f64],
    rows: &[f64],
    dim: usize,
    out: &mut [f64],
    dot: impl Fn(&[f64], &[f64]) -> f64,
) {
    let n_rows = rows.len() / dim;
    for (qi, q) in queries.chunks_exact(dim).enumerate() {
        let dst = &mut out[qi * n_rows..(qi + 1) * n_rows];
        for (r, row) in rows.chunks_exact(dim).enumerate() {
            dst[r] = dot(q, row);
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod x86 {
    use std::arch::x86_64::*;

    use super::LANES;

    #[inline(always)]
    fn dot_fused(a: &[f64], b: &[f64]) -> f64 {
        dot_body!(a, b, super::madd_fused)
    }

    #[inline(always)]
    unsafe fn hsum_lanes(lo: __m256d, hi: __m256d) -> f64 {
        let mut l = [0.0f64; LANES];
        _mm256_storeu_pd(l.as_mut_ptr(), lo);
        _mm256_storeu_pd(l.as_mut_ptr().add(4), hi);
        let s = ((l[0] + l[1]) + (l[2] + l[3])) + ((l[4] + l[5]) + (l[6] + l[7]));
        s + 0.0
    }

    /// Lanes 0..4 and 4..8 of the reference kernel map onto two ymm
    /// accumulators per row; the tail goes through the scalar path.
    #[target_feature(enable = "avx2,fma")]
    unsafe fn score_block_avx2(queries: &[f64], rows: &[f64], dim: usize, out: &mut [f64]) {
        let n_rows = rows.len() / dim;
        let full = dim / LANES * LANES;
        for (qi, q) in queries.chunks_exact(dim).enumerate() {
            let dst = &mut out[qi * n_rows..(qi + 1) * n_rows];
            let qp = q.as_ptr();
            let mut r = 0;
            while r + 4 <= n_rows {
                let p0 = rows.as_ptr().add(r * dim);
                let p1 = p0.add(dim);
                let p2 = p1.add(dim);
                let p3 = p2.add(dim);
                let z = _mm256_setzero_pd();
                let (mut a0l, mut a0h, mut a1l, mut a1h) = (z, z, z, z);
                let (mut a2l, mut a2h, mut a3l, mut a3h) = (z, z, z, z);
                let mut i = 0;
                while i < full {
                    let ql = _mm256_loadu_pd(qp.add(i));
                    let qh = _mm256_loadu_pd(qp.add(i + 4));
                    a0l = _mm256_fmadd_pd(ql, _mm256_loadu_pd(p0.add(i)), a0l);
                    a0h = _mm256_fmadd_pd(qh, _mm256_loadu_pd(p0.add(i + 4)), a0h);
                    a1l = _mm256_fmadd_pd(ql, _mm256_loadu_pd(p1.add(i)), a1l);
                    a1h = _mm256_fmadd_pd(qh, _mm256_loadu_pd(p1.add(i + 4)), a1h);
                    a2l = _mm256_fmadd_pd(ql, _mm256_loadu_pd(p2.add(i)), a2l);
                    a2h = _mm256_fmadd_pd(qh, _mm256_loadu_pd(p2.add(i + 4)), a2h);
                    a3l = _mm256_fmadd_pd(ql, _mm256_loadu_pd(p3.add(i)), a3l);
                    a3h = _mm256_fmadd_pd(qh, _mm256_loadu_pd(p3.add(i + 4)), a3h);
                    i += LANES;
                }
                if full == dim {
                    dst[r] = hsum_lanes(a0l, a0h);
                    dst[r + 1] = hsum_lanes(a1l, a1h);
                    dst[r + 2] = hsum_lanes(a2l, a2h);
                    dst[r + 3] = hsum_lanes(a3l, a3h);
                } else {
                    let accs = [(a0l, a0h), (a1l, a1h), (a2l, a2h), (a3l, a3h)];
                    for (k, (lo, hi)) in accs.into_iter().enumerate() {
                        let mut l = [0.0f64; LANES];
                        _mm256_storeu_pd(l.as_mut_ptr(), lo);
                        _mm256_storeu_pd(l.as_mut_ptr().add(4), hi);
                        let row = &rows[(r + k) * dim..(r + k + 1) * dim];
                        for j in 0..dim - full {
                            l[j] = q[full + j].mul_add(row[full + j], l[j]);
                        }
                        let s = ((l[0] + l[1]) + (l[2] + l[3])) + ((l[4] + l[5]) + (l[6] + l[7]));
                        dst[r + k] = s + 0.0;
                    }
                }
                r += 4;
            }
            while r < n_rows {
                dst[r] = dot_fused(q, &rows[r * dim..(r + 1) * dim]);
                r += 1;
            }
        }
    }

    #[inline(always)]
    unsafe fn hsum_zmm(acc: __m512d) -> f64 {
        let mut l = [0.0f64; LANES];
        _mm512_storeu_pd(l.as_mut_ptr(), acc);
        let s = ((l[0] + l[1]) + (l[2] + l[3])) + ((l[4] + l[5]) + (l[6] + l[7]));
        s + 0.0
    }

    /// One zmm register holds all eight lanes of a row's accumulator.
    /// Blocks of four queries by four rows share loads; dimensions that are
    /// not a multiple of eight fall back to the avx2 path.
    #[target_feature(enable = "avx512f,avx2,fma")]
    unsafe fn score_block_avx512(queries: &[f64], rows: &[f64], dim: usize, out: &mut [f64]) {
        if !dim.is_multiple_of(LANES) {
            return score_block_avx2(queries, rows, dim, out);
        }
        const QB: usize = 4;
        const RB: usize = 4;
        let n_rows = rows.len() / dim;
        let n_queries = queries.len() / dim;
        let mut qi = 0;
        while qi < n_queries {
            let live = (n_queries - qi).min(QB);
            // short blocks repeat the last query; extra results are dropped
            let qp: [*const f64; QB] =
                std::array::from_fn(|k| queries.as_ptr().add((qi + k.min(live - 1)) * dim));
            let mut r = 0;
            while r + RB <= n_rows {
                let rp: [*const f64; RB] = std::array::from_fn(|k| rows.as_ptr().add((r + k) * dim));
                let mut acc = [[_mm512_setzero_pd(); RB]; QB];
                let mut i = 0;
                while i < dim {
                    let rv: [__m512d; RB] = std::array::from_fn(|k| _mm512_loadu_pd(rp[k].add(i)));
                    for qk in 0..QB {
                        let x = _mm512_loadu_pd(qp[qk].add(i));
                        for rk in 0..RB {
                            acc[qk][rk] = _mm512_fmadd_pd(x, rv[rk], acc[qk][rk]);
                        }
                    }
                    i += LANES;
                }
                for (qk, row_acc) in acc.iter().enumerate().take(live) {
                    let base = (qi + qk) * n_rows + r;
                    for (rk, a) in row_acc.iter().enumerate() {
                        out[base + rk] = hsum_zmm(*a);
                    }
                }
                r += RB;
            }
            while r < n_rows {
                let row = &rows[r * dim..(r + 1) * dim];
                for qk in 0..live {
                    let q = &queries[(qi + qk) * dim..(qi + qk + 1) * dim];
                    out[(qi + qk) * n_rows + r] = dot_fused(q, row);
                }
                r += 1;
            }
            qi += QB;
        }
    }

    pub(super) fn score_block(queries: &[f64], rows: &[f64], dim: usize, out: &mut [f64]) {
        // SAFETY: only selected after runtime detection of avx2 and fma.
        unsafe { score_block_avx2(queries, rows, dim, out) }
    }

    pub(super) fn score_block_wide(queries: &[f64], rows: &[f64], dim: usize, out: &mut [f64]) {
        // SAFETY: only selected after runtime detection of avx512f, avx2 and fma.
        unsafe { score_block_avx512(queries, rows, dim, out) }
    }

    pub(super) fn available() -> bool {
        is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma")
    }

    pub(super) fn wide_available() -> bool {
        available() && is_x86_feature_detected!("avx512f")
    }
}

/// Picks the fastest block scorer supported by the running CPU.
pub fn select_score_fn() -> ScoreFn {
    #[cfg(target_arch = "x86_64")]
    {
        if x86::wide_available() {
            return x86::score_block_wide;
        }
        if x86::available() {
            return x86::score_block;
        }
    }
    score_block_plain
}

/// Portable block scorer, exposed so tests can compare code paths.
pub fn portable_score_fn() -> ScoreFn {
    score_block_plain
}
