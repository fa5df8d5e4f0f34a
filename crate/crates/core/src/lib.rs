//! One-to-many Word Mover's Distance with an entropically regularized
//! Sinkhorn solver and fused sparse kernels.
//!
//! The crate evaluates the regularized transport distance from one query
//! document to every document of a corpus at once. The pipeline:
//!
//! 1. [`ingest`]: parse fastText-format embeddings, tokenize documents, and
//!    build the normalized corpus matrix ([`DocMatrix`]) and query histogram.
//! 2. [`distance`]: one blocked pass over the embedding rows produces the
//!    query-to-vocabulary distance matrix `M` together with the kernel
//!    `K = exp(-lambda * M)`, its row-scaled variant `K/r`, and its transpose.
//! 3. [`kernels`]: the scaling loop's dominant product is evaluated by a
//!    fused kernel that computes each masked dot product (SDDMM) and
//!    immediately scatters it into the dense accumulation (SpMM) without
//!    materializing the intermediate sparse matrix.
//! 4. [`sinkhorn`]: the alternating scaling iteration, finalization into
//!    per-document distances, and a dense reference implementation used as a
//!    correctness oracle.
//!
//! Parallel execution is fork-join over whole documents: the nonzero-balanced
//! [`PartitionPlan`] gives each worker a contiguous document range, so every
//! output column has exactly one writer and results are bitwise identical for
//! any worker count.

pub mod distance;
pub mod error;
pub mod ingest;
pub mod kernels;
pub mod matrix;
mod parallel;
pub mod sinkhorn;

pub use distance::{
    euclidean_rows, fused_distance_precompute, fused_distance_precompute_counted,
    fused_distance_precompute_opts, reference_precompute, PrecomputeOptions, PrecomputedMats,
};
pub use error::{Error, Result};
pub use ingest::{
    build_corpus, build_query, load_embeddings, load_stopwords, tokenize, EmbeddingMatrix,
    QueryHistogram,
};
pub use kernels::{fused_final, sddmm, sddmm_spmm, spmm, KernelStats, SddmmOutput};
pub use matrix::{
    doc_matrix_from_entries, partition_nonzeros, DenseMatrix, DocMatrix, PartitionPlan,
};
pub use sinkhorn::{
    dense_reference_wmd, finalize_wmd, init_state, select_nonzero, select_nonzero_dense,
    sinkhorn_iterate, sinkhorn_wmd, CompactQuery, IterationState, SolverConfig, SolverMode,
    WmdResult,
};
