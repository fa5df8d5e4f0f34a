//! The regularized transport solver: nonzero selection, the alternating
//! scaling loop, finalization into per-document distances, and a dense
//! reference implementation used as a correctness oracle.
//!
//! Given a query histogram `r` and a corpus `c`, the solver builds the kernel
//! `K = exp(-lambda * M)` over the query's words and repeats
//!
//! ```text
//! u = 1 ./ x
//! x = K_over_r * (c ./ (KT * u))
//! ```
//!
//! either for a fixed iteration count or until `max |dx|` drops below a
//! tolerance. The distances are then `sum(u .* ((K .* M) * v))` per document,
//! where `v = c ./ (KT * u)` is never materialized: both the loop body and
//! the finalization run through the fused sparse kernel.

use crate::distance::{
    euclidean_rows, fused_distance_precompute_opts, PrecomputeOptions, PrecomputedMats,
};
use crate::error::{Error, Result};
use crate::ingest::{EmbeddingMatrix, QueryHistogram};
use crate::kernels::{fused_final, sddmm_spmm, KernelStats};
use crate::matrix::{partition_nonzeros, DenseMatrix, DocMatrix, PartitionPlan};
use crate::parallel::{column_bands, even_ranges, row_chunks, run_partitioned};

/// The query restricted to its nonzero words: `sel` holds the strictly
/// increasing vocabulary indices, `r` the matching weights.
///
/// Fields are public so kernels can be exercised with explicitly scaled
/// weights; [`CompactQuery::new`] checks the invariants normal construction
/// relies on (positive weights summing to 1).
#[derive(Debug, Clone, PartialEq)]
pub struct CompactQuery {
    pub sel: Vec<usize>,
    pub r: Vec<f64>,
}

impl CompactQuery {
    /// Validates that `sel` is strictly increasing, the weights are positive
    /// and finite, and the weights sum to 1 within 1e-12.
    pub fn new(sel: Vec<usize>, r: Vec<f64>) -> Result<Self> {
        if sel.len() != r.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} selected words vs {} weights",
                sel.len(),
                r.len()
            )));
        }
        if sel.is_empty() {
            return Err(Error::EmptyDocument(0));
        }
        if sel.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput(
                "selected words must be strictly increasing".into(),
            ));
        }
        if r.iter().any(|&w| !w.is_finite() || w <= 0.0) {
            return Err(Error::InvalidInput(
                "query weights must be positive and finite".into(),
            ));
        }
        let sum: f64 = r.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidInput(format!(
                "query weights must sum to 1 (got {sum})"
            )));
        }
        Ok(CompactQuery { sel, r })
    }

    /// Number of distinct query words (v_r).
    pub fn v_r(&self) -> usize {
        self.sel.len()
    }
}

/// How long the scaling loop runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverMode {
    /// Run exactly `max_iter` iterations.
    FixedIterations,
    /// Stop once `max |dx| <= tol`, but never exceed `max_iter`.
    UntilConverged,
}

/// Solver parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub lambda: f64,
    pub max_iter: usize,
    /// Convergence threshold on the max elementwise change in `x`.
    pub tol: f64,
    pub mode: SolverMode,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            lambda: 10.0,
            max_iter: 15,
            tol: 1e-9,
            mode: SolverMode::FixedIterations,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "lambda must be positive and finite, got {}",
                self.lambda
            )));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidInput("max_iter must be at least 1".into()));
        }
        if !self.tol.is_finite() || self.tol < 0.0 {
            return Err(Error::InvalidInput(format!(
                "tol must be nonnegative and finite, got {}",
                self.tol
            )));
        }
        Ok(())
    }
}

/// Scaling-loop state: `x` and its elementwise reciprocal `u`, both
/// `v_r x N`.
#[derive(Debug, Clone)]
pub struct IterationState {
    pub x: DenseMatrix,
    pub u: DenseMatrix,
    pub iterations_run: usize,
}

/// Final per-document distances plus the operation counters accumulated over
/// the whole solve (including the finalization pass).
#[derive(Debug, Clone, PartialEq)]
pub struct WmdResult {
    pub distances: Vec<f64>,
    pub stats: KernelStats,
}

/// Restricts a histogram to its stored entries. `QueryHistogram` is already
/// sparse, so this is a direct repacking.
pub fn select_nonzero(r: &QueryHistogram) -> CompactQuery {
    CompactQuery {
        sel: r.idx().to_vec(),
        r: r.val().to_vec(),
    }
}

/// Dense-vector entry point: collects the strictly positive entries of `r`
/// (whose length is the vocabulary size).
///
/// # Errors
/// [`Error::EmptyDocument`] if no entry is positive, [`Error::InvalidInput`]
/// for negative or non-finite entries or weights not summing to 1.
pub fn select_nonzero_dense(r: &[f64]) -> Result<CompactQuery> {
    let mut sel = Vec::new();
    let mut weights = Vec::new();
    for (g, &value) in r.iter().enumerate() {
        if !value.is_finite() || value < 0.0 {
            return Err(Error::InvalidInput(format!(
                "histogram entry {g} must be nonnegative and finite, got {value}"
            )));
        }
        if value > 0.0 {
            sel.push(g);
            weights.push(value);
        }
    }
    CompactQuery::new(sel, weights)
}

/// Uniform starting point: every entry of `x` is `1 / v_r`.
///
/// # Panics
/// Panics if `v_r` or `n` is zero.
pub fn init_state(v_r: usize, n: usize) -> IterationState {
    assert!(v_r >= 1, "query must have at least one word");
    assert!(n >= 1, "corpus must have at least one document");
    IterationState {
        x: DenseMatrix::filled(v_r, n, 1.0 / v_r as f64),
        u: DenseMatrix::filled(v_r, n, v_r as f64),
        iterations_run: 0,
    }
}

/// Writes `1 ./ x` into `u`, column-parallel over the worker partition.
fn reciprocal_into(x: &DenseMatrix, u: &mut DenseMatrix, plan: &PartitionPlan) {
    let bands = column_bands(u, plan.ranges());
    run_partitioned(bands, |_, mut band| {
        for (i, row) in band.rows.iter_mut().enumerate() {
            let src = &x.row(i)[band.begin..band.begin + row.len()];
            for (dst, s) in row.iter_mut().zip(src) {
                *dst = 1.0 / s;
            }
        }
    });
}

fn max_abs_diff(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .fold(0.0, |acc, (x, y)| acc.max((x - y).abs()))
}

fn check_solver_dims(state: &IterationState, mats: &PrecomputedMats, c: &DocMatrix) -> Result<()> {
    let v_r = mats.k.rows();
    if state.x.rows() != v_r || state.u.rows() != v_r {
        return Err(Error::DimensionMismatch(format!(
            "state holds {} query words but the precompute has {v_r}",
            state.x.rows()
        )));
    }
    if state.x.cols() != c.num_docs() {
        return Err(Error::DimensionMismatch(format!(
            "state holds {} documents but the corpus has {}",
            state.x.cols(),
            c.num_docs()
        )));
    }
    if mats.k.cols() != c.vocab_size() {
        return Err(Error::DimensionMismatch(format!(
            "precompute covers {} vocabulary words but the corpus has {}",
            mats.k.cols(),
            c.vocab_size()
        )));
    }
    Ok(())
}

/// Runs the scaling loop on `state`, consuming and returning it.
///
/// Each pass sets `u = 1 ./ x` and recomputes `x` through the fused kernel.
/// In fixed mode exactly `cfg.max_iter` passes run; in until-converged mode
/// the loop stops after the first pass whose max elementwise change is at
/// most `cfg.tol`. `stats.iterations` gains the number of passes executed.
pub fn sinkhorn_iterate(
    mut state: IterationState,
    mats: &PrecomputedMats,
    c: &DocMatrix,
    cfg: &SolverConfig,
    plan: &PartitionPlan,
    stats: &mut KernelStats,
) -> Result<IterationState> {
    cfg.validate()?;
    check_solver_dims(&state, mats, c)?;
    let mut ran = 0;
    while ran < cfg.max_iter {
        reciprocal_into(&state.x, &mut state.u, plan);
        let x_new = sddmm_spmm(c, &mats.kt, &state.u, &mats.k_over_r, plan, stats)?;
        ran += 1;
        let converged = match cfg.mode {
            SolverMode::FixedIterations => false,
            SolverMode::UntilConverged => max_abs_diff(&state.x, &x_new) <= cfg.tol,
        };
        state.x = x_new;
        if converged {
            break;
        }
    }
    state.iterations_run = ran;
    stats.iterations += ran as u64;
    Ok(state)
}

/// Finalizes a solved state into per-document distances: takes a fresh
/// `u = 1 ./ x`, forms `KM = K .* M` (used only here, so computed lazily),
/// and evaluates `sum(u .* (KM * v))` per document through the fused kernel.
pub fn finalize_wmd(
    mut state: IterationState,
    mats: &PrecomputedMats,
    c: &DocMatrix,
    plan: &PartitionPlan,
    stats: &mut KernelStats,
) -> Result<WmdResult> {
    check_solver_dims(&state, mats, c)?;
    reciprocal_into(&state.x, &mut state.u, plan);

    let v_r = mats.k.rows();
    let mut km = DenseMatrix::zeros(v_r, mats.k.cols());
    {
        let ranges = even_ranges(v_r, plan.num_workers().min(v_r).max(1));
        let chunks = row_chunks(&mut km, &ranges);
        let tasks: Vec<_> = ranges.iter().copied().zip(chunks).collect();
        run_partitioned(tasks, |_, ((row_begin, _), chunk)| {
            let cols = mats.k.cols();
            for (offset, dst) in chunk.iter_mut().enumerate() {
                let i = row_begin + offset / cols;
                let g = offset % cols;
                *dst = mats.k.at(i, g) * mats.m.at(i, g);
            }
        });
    }

    let distances = fused_final(c, &mats.kt, &state.u, &km, plan, stats)?;
    Ok(WmdResult {
        distances,
        stats: *stats,
    })
}

fn check_vocab_agreement(r: &QueryHistogram, c: &DocMatrix, emb: &EmbeddingMatrix) -> Result<()> {
    if r.vocab_size() != emb.vocab_size() || c.vocab_size() != emb.vocab_size() {
        return Err(Error::DimensionMismatch(format!(
            "vocabulary sizes disagree: query {}, corpus {}, embeddings {}",
            r.vocab_size(),
            c.vocab_size(),
            emb.vocab_size()
        )));
    }
    Ok(())
}

/// Fails fast if some kernel row underflowed entirely to the subnormal range,
/// which would poison the scaling loop with zero dot products.
fn kernel_underflow_check(k: &DenseMatrix) -> Result<()> {
    for i in 0..k.rows() {
        if k.row(i).iter().all(|&v| v < 1e-300) {
            return Err(Error::LambdaTooLarge { row: i });
        }
    }
    Ok(())
}

/// One-to-many distance from `r` to every document of `c`.
///
/// Composes the full pipeline: nonzero selection, fused precompute,
/// nonzero-balanced partitioning, the scaling loop, and finalization. The
/// result is bitwise identical for every `workers` value because each output
/// column is owned by exactly one worker.
///
/// # Panics
/// Panics if `workers` is zero.
pub fn sinkhorn_wmd(
    r: &QueryHistogram,
    c: &DocMatrix,
    emb: &EmbeddingMatrix,
    cfg: &SolverConfig,
    workers: usize,
) -> Result<WmdResult> {
    assert!(workers >= 1, "at least one worker required");
    cfg.validate()?;
    check_vocab_agreement(r, c, emb)?;
    if c.num_docs() == 0 {
        return Err(Error::InvalidInput("corpus has no documents".into()));
    }

    let query = select_nonzero(r);
    let opts = PrecomputeOptions {
        workers,
        ..PrecomputeOptions::default()
    };
    let mats = fused_distance_precompute_opts(emb, &query, cfg.lambda, &opts);
    kernel_underflow_check(&mats.k)?;

    let plan = partition_nonzeros(c, workers);
    let mut stats = KernelStats::default();
    let state = init_state(query.v_r(), c.num_docs());
    let state = sinkhorn_iterate(state, &mats, c, cfg, &plan, &mut stats)?;
    finalize_wmd(state, &mats, c, &plan, &mut stats)
}

/// Literal dense evaluation of the same algorithm, as a correctness oracle.
///
/// Materializes the full `V x N` product `KT * u`, masks it by the dense
/// corpus scatter, and finishes with dense products and reductions. Every
/// accumulation runs in plain index order. Intended for small instances
/// only. The returned stats carry the iteration count; the MAC counters stay
/// zero because this path never runs the instrumented kernels.
pub fn dense_reference_wmd(
    r: &QueryHistogram,
    c: &DocMatrix,
    emb: &EmbeddingMatrix,
    cfg: &SolverConfig,
) -> Result<WmdResult> {
    cfg.validate()?;
    check_vocab_agreement(r, c, emb)?;
    if c.num_docs() == 0 {
        return Err(Error::InvalidInput("corpus has no documents".into()));
    }

    let query = select_nonzero(r);
    let v_r = query.v_r();
    let vocab = emb.vocab_size();
    let n = c.num_docs();

    // Plain (unfused, unblocked) precompute.
    let m = euclidean_rows(emb, &query.sel);
    let mut k = DenseMatrix::zeros(v_r, vocab);
    let mut k_over_r = DenseMatrix::zeros(v_r, vocab);
    let mut kt = DenseMatrix::zeros(vocab, v_r);
    for i in 0..v_r {
        for g in 0..vocab {
            let kern = (-cfg.lambda * m.at(i, g)).exp();
            *k.at_mut(i, g) = kern;
            *k_over_r.at_mut(i, g) = kern / query.r[i];
            *kt.at_mut(g, i) = kern;
        }
    }
    kernel_underflow_check(&k)?;

    // Dense scatter of the corpus.
    let mut c_dense = DenseMatrix::zeros(vocab, n);
    for j in 0..n {
        let (words, weights) = c.doc(j);
        for (&g, &w) in words.iter().zip(weights) {
            *c_dense.at_mut(g, j) = w;
        }
    }

    let reciprocal = |x: &DenseMatrix| {
        let mut u = DenseMatrix::zeros(v_r, n);
        for (dst, src) in u.data_mut().iter_mut().zip(x.data()) {
            *dst = 1.0 / src;
        }
        u
    };
    // v = c .* (1 ./ (KT * u)), dense in V x N.
    let masked_ratio = |u: &DenseMatrix| {
        let mut v = DenseMatrix::zeros(vocab, n);
        for g in 0..vocab {
            for j in 0..n {
                let weight = c_dense.at(g, j);
                if weight != 0.0 {
                    let mut dot = 0.0;
                    for i in 0..v_r {
                        dot += kt.at(g, i) * u.at(i, j);
                    }
                    *v.at_mut(g, j) = weight / dot;
                }
            }
        }
        v
    };
    // Dense product of a v_r x V matrix with v, accumulated over all of V.
    let dense_product = |a: &DenseMatrix, v: &DenseMatrix| {
        let mut out = DenseMatrix::zeros(v_r, n);
        for i in 0..v_r {
            for j in 0..n {
                let mut acc = 0.0;
                for g in 0..vocab {
                    acc += a.at(i, g) * v.at(g, j);
                }
                *out.at_mut(i, j) = acc;
            }
        }
        out
    };

    let mut x = DenseMatrix::filled(v_r, n, 1.0 / v_r as f64);
    let mut iterations = 0u64;
    while (iterations as usize) < cfg.max_iter {
        let u = reciprocal(&x);
        let v = masked_ratio(&u);
        let x_new = dense_product(&k_over_r, &v);
        iterations += 1;
        let converged = match cfg.mode {
            SolverMode::FixedIterations => false,
            SolverMode::UntilConverged => max_abs_diff(&x, &x_new) <= cfg.tol,
        };
        x = x_new;
        if converged {
            break;
        }
    }

    let u = reciprocal(&x);
    let v = masked_ratio(&u);
    let mut km = DenseMatrix::zeros(v_r, vocab);
    for i in 0..v_r {
        for g in 0..vocab {
            *km.at_mut(i, g) = k.at(i, g) * m.at(i, g);
        }
    }
    let y = dense_product(&km, &v);
    let mut distances = vec![0.0; n];
    for (j, out) in distances.iter_mut().enumerate() {
        let mut acc = 0.0;
        for i in 0..v_r {
            acc += u.at(i, j) * y.at(i, j);
        }
        *out = acc;
    }

    Ok(WmdResult {
        distances,
        stats: KernelStats {
            sddmm_mac_count: 0,
            spmm_mac_count: 0,
            iterations,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::load_embeddings;
    use std::io::Cursor;

    fn toy_setup() -> (EmbeddingMatrix, DocMatrix, QueryHistogram) {
        // Three words: e0 at the origin, e1 across a 3-4-5 triangle, e2 one
        // unit up. Query is {e0}, corpus documents are {e0} and {e1}.
        let emb = load_embeddings(Cursor::new("3 2\na 0 0\nb 3 4\nc 0 1\n")).unwrap();
        let c = crate::matrix::doc_matrix_from_entries(3, 2, &[(0, 0, 1.0), (1, 1, 1.0)]).unwrap();
        let r = QueryHistogram::new(3, vec![0], vec![1.0]).unwrap();
        (emb, c, r)
    }

    #[test]
    fn select_nonzero_dense_examples() {
        let q = select_nonzero_dense(&[0.0, 0.3, 0.0, 0.7]).unwrap();
        assert_eq!(q.sel, vec![1, 3]);
        assert_eq!(q.r, vec![0.3, 0.7]);

        let q = select_nonzero_dense(&[1.0, 0.0]).unwrap();
        assert_eq!(q.sel, vec![0]);
        assert_eq!(q.r, vec![1.0]);

        assert!(matches!(
            select_nonzero_dense(&[0.0, 0.0]).unwrap_err(),
            Error::EmptyDocument(0)
        ));
    }

    #[test]
    fn init_state_is_uniform() {
        let s = init_state(4, 2);
        assert!(s.x.data().iter().all(|&v| v == 0.25));
        assert_eq!(s.iterations_run, 0);

        let s = init_state(1, 5);
        assert!(s.x.data().iter().all(|&v| v == 1.0));

        let s = init_state(19, 7);
        assert!(s.x.data().iter().all(|&v| v == 1.0 / 19.0));
    }

    #[test]
    fn stationary_point_converges_in_one_iteration() {
        // Single-word query against a single-document corpus holding only
        // that word: x = (1/r) * K00 * (c / (K00 * u)) = 1/u = x, so the
        // first pass reproduces x exactly.
        let emb = load_embeddings(Cursor::new("1 1\na 0\n")).unwrap();
        let c = crate::matrix::doc_matrix_from_entries(1, 1, &[(0, 0, 1.0)]).unwrap();
        let r = QueryHistogram::new(1, vec![0], vec![1.0]).unwrap();
        let cfg = SolverConfig {
            mode: SolverMode::UntilConverged,
            ..SolverConfig::default()
        };
        let result = sinkhorn_wmd(&r, &c, &emb, &cfg, 1).unwrap();
        assert_eq!(result.stats.iterations, 1);
        assert_eq!(result.distances, vec![0.0]);
    }

    #[test]
    fn fixed_mode_runs_exactly_max_iter() {
        let (emb, c, r) = toy_setup();
        let cfg = SolverConfig {
            max_iter: 15,
            mode: SolverMode::FixedIterations,
            ..SolverConfig::default()
        };
        let result = sinkhorn_wmd(&r, &c, &emb, &cfg, 1).unwrap();
        assert_eq!(result.stats.iterations, 15);
    }

    #[test]
    fn toy_distances_are_zero_and_five() {
        let (emb, c, r) = toy_setup();
        for cfg in [
            SolverConfig::default(),
            SolverConfig {
                mode: SolverMode::UntilConverged,
                tol: 1e-12,
                max_iter: 100,
                ..SolverConfig::default()
            },
        ] {
            let sparse = sinkhorn_wmd(&r, &c, &emb, &cfg, 1).unwrap();
            assert!(sparse.distances[0].abs() <= 1e-12);
            assert!((sparse.distances[1] - 5.0).abs() <= 1e-12);

            let dense = dense_reference_wmd(&r, &c, &emb, &cfg).unwrap();
            assert!(dense.distances[0].abs() <= 1e-12);
            assert!((dense.distances[1] - 5.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn sparse_and_dense_agree_on_multiword_instance() {
        let emb = load_embeddings(Cursor::new(
            "4 2\na 0 0\nb 1 0\nc 0.25 0.5\nd 0.75 0.25\n",
        ))
        .unwrap();
        let c = crate::matrix::doc_matrix_from_entries(
            4,
            3,
            &[
                (0, 0, 2.0),
                (0, 2, 1.0),
                (1, 1, 1.0),
                (1, 3, 3.0),
                (2, 0, 1.0),
                (2, 1, 1.0),
                (2, 2, 1.0),
            ],
        )
        .unwrap();
        let r = QueryHistogram::new(4, vec![0, 3], vec![0.5, 0.5]).unwrap();
        let cfg = SolverConfig {
            lambda: 5.0,
            max_iter: 15,
            ..SolverConfig::default()
        };
        let sparse = sinkhorn_wmd(&r, &c, &emb, &cfg, 2).unwrap();
        let dense = dense_reference_wmd(&r, &c, &emb, &cfg).unwrap();
        for (s, d) in sparse.distances.iter().zip(&dense.distances) {
            assert!((s - d).abs() <= 1e-10, "sparse {s} vs dense {d}");
            assert!(*s >= 0.0);
        }
        assert_eq!(sparse.stats.iterations, dense.stats.iterations);
    }

    #[test]
    fn worker_counts_give_bitwise_identical_results() {
        let (emb, c, r) = toy_setup();
        let cfg = SolverConfig::default();
        let baseline = sinkhorn_wmd(&r, &c, &emb, &cfg, 1).unwrap();
        for workers in [2, 3, 4, 8] {
            let other = sinkhorn_wmd(&r, &c, &emb, &cfg, workers).unwrap();
            let same = baseline
                .distances
                .iter()
                .zip(&other.distances)
                .all(|(a, b)| a.to_bits() == b.to_bits());
            assert!(same, "distances diverged at {workers} workers");
            assert_eq!(baseline.stats, other.stats);
        }
    }

    #[test]
    fn underflow_check_fires_on_dead_rows() {
        let k = DenseMatrix::from_vec(2, 2, vec![0.5, 1e-301, 0.0, 0.0]).unwrap();
        let err = kernel_underflow_check(&k).unwrap_err();
        assert!(matches!(err, Error::LambdaTooLarge { row: 1 }));

        let k = DenseMatrix::from_vec(1, 2, vec![1e-300, 0.0]).unwrap();
        assert!(kernel_underflow_check(&k).is_ok());
    }

    #[test]
    fn vocab_disagreement_is_rejected() {
        let (emb, c, _) = toy_setup();
        let r = QueryHistogram::new(5, vec![0], vec![1.0]).unwrap();
        let err = sinkhorn_wmd(&r, &c, &emb, &SolverConfig::default(), 1).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch(_)));
    }

    #[test]
    fn compact_query_validation() {
        assert!(CompactQuery::new(vec![0, 2], vec![0.5, 0.5]).is_ok());
        assert!(CompactQuery::new(vec![2, 0], vec![0.5, 0.5]).is_err());
        assert!(CompactQuery::new(vec![0], vec![0.5]).is_err());
        assert!(CompactQuery::new(vec![0, 1], vec![1.5, -0.5]).is_err());
        assert!(matches!(
            CompactQuery::new(vec![], vec![]).unwrap_err(),
            Error::EmptyDocument(0)
        ));
    }
}
