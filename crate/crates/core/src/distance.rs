//! Query-to-vocabulary Euclidean distances and the fused precompute of every
//! matrix the scaling loop reuses.
//!
//! One blocked pass over the embedding rows produces four matrices at once:
//! the distance matrix `M`, the kernel `K = exp(-lambda * M)`, the row-scaled
//! `K_over_r`, and the transpose `KT` (stored separately so the sparse
//! kernel's dot products run at unit stride). Blocking covers the vocabulary
//! and query dimensions; the embedding dimension stays unblocked, so each
//! entry is one straight-line accumulation of `(a - b)^2` terms and the
//! result does not depend on block sizes or worker count.

use crate::ingest::EmbeddingMatrix;
use crate::matrix::DenseMatrix;
use crate::parallel::{column_bands, even_ranges, row_chunks, run_partitioned, ColumnBand};
use crate::sinkhorn::CompactQuery;

/// The matrices derived from one query against the full vocabulary.
#[derive(Debug, Clone)]
pub struct PrecomputedMats {
    /// Euclidean distance, `v_r x V`.
    pub m: DenseMatrix,
    /// `exp(-lambda * M)`, `v_r x V`.
    pub k: DenseMatrix,
    /// Row `i` of `K` divided by the query weight `r[i]`, `v_r x V`.
    pub k_over_r: DenseMatrix,
    /// Transpose of `K`, `V x v_r`.
    pub kt: DenseMatrix,
    /// Regularization strength the kernel was built with.
    pub lambda: f64,
}

/// Tuning knobs for [`fused_distance_precompute_opts`]. The defaults match
/// the serial entry point: one worker, 64-column vocabulary blocks, and the
/// query dimension left unblocked (queries are short).
#[derive(Debug, Clone, Copy)]
pub struct PrecomputeOptions {
    pub workers: usize,
    pub vocab_block: usize,
    /// `None` leaves the query dimension unblocked.
    pub query_block: Option<usize>,
}

impl Default for PrecomputeOptions {
    fn default() -> Self {
        PrecomputeOptions {
            workers: 1,
            vocab_block: 64,
            query_block: None,
        }
    }
}

fn validate_query(emb: &EmbeddingMatrix, sel: &[usize], r: Option<&[f64]>) {
    assert!(!sel.is_empty(), "query must select at least one word");
    for (pos, &g) in sel.iter().enumerate() {
        assert!(g < emb.vocab_size(), "selected word {g} out of range");
        assert!(
            pos == 0 || sel[pos - 1] < g,
            "selected words must be strictly increasing"
        );
    }
    if let Some(r) = r {
        assert_eq!(r.len(), sel.len(), "query weights must match selection");
        assert!(
            r.iter().all(|&w| w.is_finite() && w > 0.0),
            "query weights must be positive and finite"
        );
    }
}

/// Plain reference distance computation: `out[i, g]` is the Euclidean
/// distance between embedding rows `sel[i]` and `g`, accumulated over the
/// embedding dimension in index order.
///
/// # Panics
/// Panics if `sel` is empty, out of range, or not strictly increasing.
pub fn euclidean_rows(emb: &EmbeddingMatrix, sel: &[usize]) -> DenseMatrix {
    validate_query(emb, sel, None);
    let vocab = emb.vocab_size();
    let mut out = DenseMatrix::zeros(sel.len(), vocab);
    for (i, &s) in sel.iter().enumerate() {
        let query_row = emb.row(s);
        let out_row = out.row_mut(i);
        for (g, slot) in out_row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (a, b) in query_row.iter().zip(emb.row(g)) {
                let d = a - b;
                acc += d * d;
            }
            *slot = acc.sqrt();
        }
    }
    out
}

/// Serial fused precompute with default block sizes.
///
/// # Panics
/// Panics if `lambda` is not positive and finite or the query is invalid
/// (see [`euclidean_rows`]).
pub fn fused_distance_precompute(
    emb: &EmbeddingMatrix,
    query: &CompactQuery,
    lambda: f64,
) -> PrecomputedMats {
    fused_distance_precompute_opts(emb, query, lambda, &PrecomputeOptions::default())
}

/// Fused precompute with explicit worker count and block sizes.
pub fn fused_distance_precompute_opts(
    emb: &EmbeddingMatrix,
    query: &CompactQuery,
    lambda: f64,
    opts: &PrecomputeOptions,
) -> PrecomputedMats {
    fused_distance_precompute_counted(emb, query, lambda, opts).0
}

/// As [`fused_distance_precompute_opts`], additionally returning the number
/// of inner-loop updates executed. Each update is one subtract, multiply,
/// accumulate triple (3 FLOPs), and the count is exactly `v_r * V * w`.
// The query index addresses six parallel arrays at once; an iterator chain
// would bury that structure.
#[allow(clippy::needless_range_loop)]
pub fn fused_distance_precompute_counted(
    emb: &EmbeddingMatrix,
    query: &CompactQuery,
    lambda: f64,
    opts: &PrecomputeOptions,
) -> (PrecomputedMats, u64) {
    assert!(
        lambda.is_finite() && lambda > 0.0,
        "lambda must be positive and finite, got {lambda}"
    );
    validate_query(emb, &query.sel, Some(&query.r));
    assert!(opts.workers >= 1, "at least one worker required");
    assert!(opts.vocab_block >= 1, "vocabulary block must be nonempty");

    let v_r = query.sel.len();
    let vocab = emb.vocab_size();
    let dim = emb.dim();
    let vocab_block = opts.vocab_block;
    let query_block = opts.query_block.unwrap_or(v_r).max(1);
    let query_rows: Vec<&[f64]> = query.sel.iter().map(|&s| emb.row(s)).collect();

    let mut m = DenseMatrix::zeros(v_r, vocab);
    let mut k = DenseMatrix::zeros(v_r, vocab);
    let mut k_over_r = DenseMatrix::zeros(v_r, vocab);
    let mut kt = DenseMatrix::zeros(vocab, v_r);

    struct Task<'a> {
        range: (usize, usize),
        m: ColumnBand<'a>,
        k: ColumnBand<'a>,
        k_over_r: ColumnBand<'a>,
        kt: &'a mut [f64],
    }

    let workers = opts.workers.min(vocab).max(1);
    let ranges = even_ranges(vocab, workers);
    let tasks: Vec<Task> = {
        let m_bands = column_bands(&mut m, &ranges);
        let k_bands = column_bands(&mut k, &ranges);
        let kor_bands = column_bands(&mut k_over_r, &ranges);
        let kt_chunks = row_chunks(&mut kt, &ranges);
        ranges
            .iter()
            .zip(m_bands)
            .zip(k_bands)
            .zip(kor_bands)
            .zip(kt_chunks)
            .map(|((((&range, m), k), k_over_r), kt)| Task {
                range,
                m,
                k,
                k_over_r,
                kt,
            })
            .collect()
    };

    let counts = run_partitioned(tasks, |_, mut task| {
        let (begin, end) = task.range;
        let mut updates = 0u64;
        let mut block_begin = begin;
        while block_begin < end {
            let block_end = (block_begin + vocab_block).min(end);
            let mut q_begin = 0;
            while q_begin < v_r {
                let q_end = (q_begin + query_block).min(v_r);
                for g in block_begin..block_end {
                    let vocab_row = emb.row(g);
                    let off = g - begin;
                    for i in q_begin..q_end {
                        let mut acc = 0.0;
                        for (a, b) in query_rows[i].iter().zip(vocab_row) {
                            let d = a - b;
                            acc += d * d;
                        }
                        updates += dim as u64;
                        let dist = acc.sqrt();
                        let kern = (-lambda * dist).exp();
                        task.m.rows[i][off] = dist;
                        task.k.rows[i][off] = kern;
                        task.k_over_r.rows[i][off] = kern / query.r[i];
                        task.kt[off * v_r + i] = kern;
                    }
                }
                q_begin = q_end;
            }
            block_begin = block_end;
        }
        updates
    });

    let mats = PrecomputedMats {
        m,
        k,
        k_over_r,
        kt,
        lambda,
    };
    (mats, counts.iter().sum())
}

/// Unblocked single-threaded precompute built on [`euclidean_rows`]; the
/// plain alternative to the fused path, producing identical matrices.
pub fn reference_precompute(
    emb: &EmbeddingMatrix,
    query: &CompactQuery,
    lambda: f64,
) -> PrecomputedMats {
    assert!(
        lambda.is_finite() && lambda > 0.0,
        "lambda must be positive and finite, got {lambda}"
    );
    validate_query(emb, &query.sel, Some(&query.r));
    let m = euclidean_rows(emb, &query.sel);
    let v_r = query.sel.len();
    let vocab = emb.vocab_size();
    let mut k = DenseMatrix::zeros(v_r, vocab);
    let mut k_over_r = DenseMatrix::zeros(v_r, vocab);
    let mut kt = DenseMatrix::zeros(vocab, v_r);
    for i in 0..v_r {
        for g in 0..vocab {
            let kern = (-lambda * m.at(i, g)).exp();
            *k.at_mut(i, g) = kern;
            *k_over_r.at_mut(i, g) = kern / query.r[i];
            *kt.at_mut(g, i) = kern;
        }
    }
    PrecomputedMats {
        m,
        k,
        k_over_r,
        kt,
        lambda,
    }
}
