//! The SDDMM, SpMM, and fused SDDMM-SpMM kernels.
//!
//! The scaling loop's dominant product masks a dense-dense product by the
//! corpus sparsity pattern (SDDMM), divides the corpus weights by the masked
//! dots, and multiplies the resulting sparse matrix back against a dense one
//! (SpMM). The fused kernel computes each masked dot and immediately scatters
//! `weight / dot` into the output accumulation, so the intermediate sparse
//! values never exist beyond a per-entry scalar.
//!
//! Parallel execution follows the document partition: a worker's documents
//! are exactly its output columns, so workers write disjoint column bands and
//! the result is bitwise identical for every worker count. The standalone
//! [`sddmm`] and [`spmm`] are the serial building blocks the fused kernel is
//! checked against.

use crate::error::{Error, Result};
use crate::matrix::{DenseMatrix, DocMatrix, PartitionPlan};
use crate::parallel::{column_bands, run_partitioned};

/// Sparse result of an SDDMM: the corpus pattern by reference plus one value
/// per stored entry.
#[derive(Debug, Clone)]
pub struct SddmmOutput<'a> {
    pattern: &'a DocMatrix,
    values: Vec<f64>,
}

impl<'a> SddmmOutput<'a> {
    /// Pairs explicit entry values with a corpus sparsity pattern. The value
    /// count must equal the pattern's entry count.
    pub fn from_values(pattern: &'a DocMatrix, values: Vec<f64>) -> Result<Self> {
        if values.len() != pattern.nnz() {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a pattern with {} entries",
                values.len(),
                pattern.nnz()
            )));
        }
        Ok(SddmmOutput { pattern, values })
    }

    pub fn pattern(&self) -> &DocMatrix {
        self.pattern
    }

    /// One value per pattern entry, in pattern order.
    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Operation counters carried through a solve.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct KernelStats {
    /// Multiply-accumulates spent on masked dot products. One full fused
    /// pass adds exactly `nnz * v_r`.
    pub sddmm_mac_count: u64,
    /// Multiply-accumulates spent scattering entry values into the dense
    /// output. One full fused pass adds exactly `nnz * v_r`.
    pub spmm_mac_count: u64,
    /// Scaling iterations executed.
    pub iterations: u64,
}

fn check_sddmm_dims(c: &DocMatrix, kt: &DenseMatrix, u: &DenseMatrix) -> Result<()> {
    if kt.rows() != c.vocab_size() {
        return Err(Error::DimensionMismatch(format!(
            "KT has {} rows but the corpus vocabulary is {}",
            kt.rows(),
            c.vocab_size()
        )));
    }
    if kt.cols() != u.rows() {
        return Err(Error::DimensionMismatch(format!(
            "KT has {} columns but u has {} rows",
            kt.cols(),
            u.rows()
        )));
    }
    if u.cols() != c.num_docs() {
        return Err(Error::DimensionMismatch(format!(
            "u has {} columns but the corpus has {} documents",
            u.cols(),
            c.num_docs()
        )));
    }
    Ok(())
}

#[inline]
fn masked_dot(kt: &DenseMatrix, u: &DenseMatrix, word: usize, doc: usize, entry: usize) -> Result<f64> {
    let kt_row = kt.row(word);
    let mut dot = 0.0;
    for (i, &kv) in kt_row.iter().enumerate() {
        dot += kv * u.at(i, doc);
    }
    if !dot.is_finite() || dot == 0.0 {
        return Err(Error::NumericalBreakdown { entry });
    }
    Ok(dot)
}

/// Sampled dense-dense product: for every stored corpus entry `(word, doc)`,
/// divides the corpus weight by `dot(KT[word, :], u[:, doc])`. Entries
/// outside the pattern are never computed.
///
/// # Errors
/// [`Error::NumericalBreakdown`] if a dot product is zero or non-finite
/// (impossible while `K > 0` and `u > 0`), [`Error::DimensionMismatch`] on
/// shape disagreement.
pub fn sddmm<'a>(c: &'a DocMatrix, kt: &DenseMatrix, u: &DenseMatrix) -> Result<SddmmOutput<'a>> {
    check_sddmm_dims(c, kt, u)?;
    let mut values = vec![0.0; c.nnz()];
    for j in 0..c.num_docs() {
        // The entry index addresses word_idx, weight, and values together.
        #[allow(clippy::needless_range_loop)]
        for e in c.doc_ptr()[j]..c.doc_ptr()[j + 1] {
            let dot = masked_dot(kt, u, c.word_idx()[e], j, e)?;
            values[e] = c.weight()[e] / dot;
        }
    }
    Ok(SddmmOutput { pattern: c, values })
}

/// Dense-times-sparse product `A @ v`: `out[i, j]` accumulates
/// `A[i, word] * value` over the entries of document `j` in storage order.
pub fn spmm(a: &DenseMatrix, v: &SddmmOutput<'_>) -> Result<DenseMatrix> {
    let c = v.pattern;
    if a.cols() != c.vocab_size() {
        return Err(Error::DimensionMismatch(format!(
            "A has {} columns but the corpus vocabulary is {}",
            a.cols(),
            c.vocab_size()
        )));
    }
    let rows = a.rows();
    let mut out = DenseMatrix::zeros(rows, c.num_docs());
    for j in 0..c.num_docs() {
        for e in c.doc_ptr()[j]..c.doc_ptr()[j + 1] {
            let g = c.word_idx()[e];
            let value = v.values[e];
            for i in 0..rows {
                *out.at_mut(i, j) += a.at(i, g) * value;
            }
        }
    }
    Ok(out)
}

/// Fused SDDMM and SpMM over the worker partition.
///
/// Produces exactly `spmm(a, sddmm(c, kt, u))` bitwise: per entry, the masked
/// dot runs over `i` in index order and `weight / dot` is scattered into
/// column `j` immediately, and each document's entries are visited in storage
/// order by the single worker that owns the document. `stats` gains
/// `nnz * v_r` SDDMM multiply-accumulates and `nnz * a.rows()` SpMM
/// multiply-accumulates.
pub fn sddmm_spmm(
    c: &DocMatrix,
    kt: &DenseMatrix,
    u: &DenseMatrix,
    a: &DenseMatrix,
    plan: &PartitionPlan,
    stats: &mut KernelStats,
) -> Result<DenseMatrix> {
    check_sddmm_dims(c, kt, u)?;
    if a.cols() != c.vocab_size() {
        return Err(Error::DimensionMismatch(format!(
            "A has {} columns but the corpus vocabulary is {}",
            a.cols(),
            c.vocab_size()
        )));
    }
    let v_r = kt.cols();
    let rows = a.rows();
    let mut x = DenseMatrix::zeros(rows, c.num_docs());

    let worker_counts = {
        let bands = column_bands(&mut x, plan.ranges());
        let tasks: Vec<_> = plan.ranges().iter().copied().zip(bands).collect();
        run_partitioned(tasks, |_, ((doc_begin, doc_end), mut band)| -> Result<(u64, u64)> {
            let mut sddmm_macs = 0u64;
            let mut spmm_macs = 0u64;
            for j in doc_begin..doc_end {
                let col = j - doc_begin;
                for e in c.doc_ptr()[j]..c.doc_ptr()[j + 1] {
                    let g = c.word_idx()[e];
                    let dot = masked_dot(kt, u, g, j, e)?;
                    sddmm_macs += v_r as u64;
                    let value = c.weight()[e] / dot;
                    for i in 0..rows {
                        band.rows[i][col] += a.at(i, g) * value;
                    }
                    spmm_macs += rows as u64;
                }
            }
            Ok((sddmm_macs, spmm_macs))
        })
    };

    let mut sddmm_total = 0u64;
    let mut spmm_total = 0u64;
    for counts in worker_counts {
        let (sddmm_macs, spmm_macs): (u64, u64) = counts?;
        sddmm_total += sddmm_macs;
        spmm_total += spmm_macs;
    }
    stats.sddmm_mac_count += sddmm_total;
    stats.spmm_mac_count += spmm_total;
    Ok(x)
}

/// Final distance evaluation: runs the fused kernel with `KM = K .* M` as the
/// dense operand, then reduces each output column against `u`, yielding one
/// distance per document.
pub fn fused_final(
    c: &DocMatrix,
    kt: &DenseMatrix,
    u: &DenseMatrix,
    km: &DenseMatrix,
    plan: &PartitionPlan,
    stats: &mut KernelStats,
) -> Result<Vec<f64>> {
    let y = sddmm_spmm(c, kt, u, km, plan, stats)?;
    let mut distances = vec![0.0; c.num_docs()];
    for (j, out) in distances.iter_mut().enumerate() {
        let mut acc = 0.0;
        for i in 0..u.rows() {
            acc += u.at(i, j) * y.at(i, j);
        }
        *out = acc;
    }
    Ok(distances)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::{doc_matrix_from_entries, partition_nonzeros};

    #[test]
    fn sddmm_single_term_dot() {
        let c = doc_matrix_from_entries(1, 1, &[(0, 0, 1.0)]).unwrap();
        let kt = DenseMatrix::from_vec(1, 1, vec![2.0]).unwrap();
        let u = DenseMatrix::from_vec(1, 1, vec![4.0]).unwrap();
        let v = sddmm(&c, &kt, &u).unwrap();
        assert_eq!(v.values(), &[0.125]);
    }

    #[test]
    fn sddmm_fractional_weight() {
        // Two equally weighted words give each entry weight 0.5.
        let c = doc_matrix_from_entries(2, 1, &[(0, 0, 1.0), (0, 1, 1.0)]).unwrap();
        let kt = DenseMatrix::from_vec(2, 1, vec![2.0, 2.0]).unwrap();
        let u = DenseMatrix::from_vec(1, 1, vec![4.0]).unwrap();
        let v = sddmm(&c, &kt, &u).unwrap();
        assert_eq!(v.values(), &[0.0625, 0.0625]);
    }

    #[test]
    fn sddmm_two_term_dot() {
        let c = doc_matrix_from_entries(2, 1, &[(0, 1, 1.0)]).unwrap();
        let kt = DenseMatrix::from_vec(2, 2, vec![5.0, 6.0, 1.0, 2.0]).unwrap();
        let u = DenseMatrix::from_vec(2, 1, vec![3.0, 4.0]).unwrap();
        let v = sddmm(&c, &kt, &u).unwrap();
        assert_eq!(v.values(), &[1.0 / 11.0]);
    }

    #[test]
    fn sddmm_reports_breakdown_entry() {
        let c = doc_matrix_from_entries(1, 1, &[(0, 0, 1.0)]).unwrap();
        let kt = DenseMatrix::from_vec(1, 1, vec![2.0]).unwrap();
        let u = DenseMatrix::from_vec(1, 1, vec![0.0]).unwrap();
        let err = sddmm(&c, &kt, &u).unwrap_err();
        assert!(matches!(err, Error::NumericalBreakdown { entry: 0 }));
    }

    #[test]
    fn spmm_scatters_documents() {
        let c = doc_matrix_from_entries(2, 1, &[(0, 0, 1.0)]).unwrap();
        let a = DenseMatrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap();
        let v = SddmmOutput::from_values(&c, vec![3.0]).unwrap();
        let x = spmm(&a, &v).unwrap();
        assert_eq!(x.data(), &[3.0]);

        let c = doc_matrix_from_entries(2, 1, &[(0, 0, 1.0), (0, 1, 1.0)]).unwrap();
        let v = SddmmOutput::from_values(&c, vec![3.0, 5.0]).unwrap();
        let x = spmm(&a, &v).unwrap();
        assert_eq!(x.data(), &[13.0]);
    }

    #[test]
    fn fused_composes_the_two_steps() {
        let c = doc_matrix_from_entries(2, 1, &[(0, 1, 1.0)]).unwrap();
        let kt = DenseMatrix::from_vec(2, 2, vec![5.0, 6.0, 1.0, 2.0]).unwrap();
        let u = DenseMatrix::from_vec(2, 1, vec![3.0, 4.0]).unwrap();
        let a = DenseMatrix::from_vec(1, 2, vec![10.0, 20.0]).unwrap();
        let plan = partition_nonzeros(&c, 1);
        let mut stats = KernelStats::default();
        let x = sddmm_spmm(&c, &kt, &u, &a, &plan, &mut stats).unwrap();
        assert!((x.at(0, 0) - 20.0 / 11.0).abs() <= 1e-15);
        assert_eq!(stats.sddmm_mac_count, 2);
        assert_eq!(stats.spmm_mac_count, 1);
    }

    #[test]
    fn fused_equals_composition_bitwise_for_any_worker_count() {
        let entries = [
            (0, 0, 2.0),
            (0, 3, 1.0),
            (1, 1, 5.0),
            (1, 2, 0.5),
            (1, 4, 1.5),
            (2, 0, 1.0),
            (3, 2, 4.0),
            (3, 4, 0.25),
        ];
        let c = doc_matrix_from_entries(5, 4, &entries).unwrap();
        let kt = DenseMatrix::from_vec(
            5,
            2,
            vec![0.9, 0.1, 0.8, 0.2, 0.7, 0.3, 0.6, 0.4, 0.5, 0.5],
        )
        .unwrap();
        let u = DenseMatrix::from_vec(2, 4, vec![1.5, 2.5, 3.5, 4.5, 0.5, 1.0, 2.0, 3.0]).unwrap();
        let a = DenseMatrix::from_vec(2, 5, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0])
            .unwrap();

        let composed = spmm(&a, &sddmm(&c, &kt, &u).unwrap()).unwrap();
        for workers in [1, 2, 3, 4, 8] {
            let plan = partition_nonzeros(&c, workers);
            let mut stats = KernelStats::default();
            let fused = sddmm_spmm(&c, &kt, &u, &a, &plan, &mut stats).unwrap();
            let same_bits = fused
                .data()
                .iter()
                .zip(composed.data())
                .all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(same_bits, "fused kernel diverged at {workers} workers");
            assert_eq!(stats.sddmm_mac_count, (c.nnz() * kt.cols()) as u64);
            assert_eq!(stats.spmm_mac_count, (c.nnz() * a.rows()) as u64);
        }
    }

    #[test]
    fn fused_final_single_word_cases() {
        // Document containing exactly the query word: KM entry is zero.
        let c = doc_matrix_from_entries(1, 1, &[(0, 0, 1.0)]).unwrap();
        let kt = DenseMatrix::from_vec(1, 1, vec![1.0]).unwrap();
        let u = DenseMatrix::from_vec(1, 1, vec![1.0]).unwrap();
        let km = DenseMatrix::from_vec(1, 1, vec![0.0]).unwrap();
        let plan = partition_nonzeros(&c, 1);
        let mut stats = KernelStats::default();
        let d = fused_final(&c, &kt, &u, &km, &plan, &mut stats).unwrap();
        assert_eq!(d, vec![0.0]);

        // One word at distance 5: transport is forced, the kernel cancels.
        let kern = (-5.0_f64).exp();
        let kt = DenseMatrix::from_vec(1, 1, vec![kern]).unwrap();
        let km = DenseMatrix::from_vec(1, 1, vec![kern * 5.0]).unwrap();
        let d = fused_final(&c, &kt, &u, &km, &plan, &mut stats).unwrap();
        assert!((d[0] - 5.0).abs() <= 1e-12);
    }

    #[test]
    fn dimension_mismatches_are_reported() {
        let c = doc_matrix_from_entries(2, 1, &[(0, 0, 1.0)]).unwrap();
        let kt = DenseMatrix::zeros(3, 1);
        let u = DenseMatrix::filled(1, 1, 1.0);
        assert!(matches!(
            sddmm(&c, &kt, &u).unwrap_err(),
            Error::DimensionMismatch(_)
        ));
        let v = SddmmOutput::from_values(&c, vec![1.0]).unwrap();
        let a = DenseMatrix::zeros(1, 3);
        assert!(matches!(
            spmm(&a, &v).unwrap_err(),
            Error::DimensionMismatch(_)
        ));
        assert!(SddmmOutput::from_values(&c, vec![1.0, 2.0]).is_err());
    }
}
