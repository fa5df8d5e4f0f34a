//! Dense and document-major sparse containers plus the nnz-balanced partitioner.
//!
//! [`DenseMatrix`] is a flat row-major buffer used for every dense operand in
//! the pipeline. [`DocMatrix`] stores the corpus compressed document-major so
//! a worker can own a contiguous run of documents, and with it a contiguous
//! block of output columns, without synchronization. [`PartitionPlan`] assigns
//! those runs by binary-searching cumulative nonzero counts.

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    /// All-zero matrix of the given shape.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    /// Matrix with every entry set to `value`.
    ///
    /// # Panics
    /// Panics if `value` is not finite.
    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        assert!(value.is_finite(), "fill value must be finite, got {value}");
        DenseMatrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// Builds a matrix from a row-major buffer.
    ///
    /// The buffer length must equal `rows * cols` and every entry must be
    /// finite.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "buffer of length {} cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite entry {} at flat index {pos}",
                data[pos]
            )));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Flat row-major view of the whole matrix.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable flat view; used by kernels to split the matrix into disjoint
    /// per-worker bands.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// Corpus matrix in compressed document-major form.
///
/// Conceptually this is the vocabulary-by-documents matrix of normalized word
/// frequencies, stored so each document's entries are contiguous:
/// `word_idx[doc_ptr[j]..doc_ptr[j+1]]` lists the (strictly increasing)
/// vocabulary indices of document `j` and `weight` holds the matching
/// frequencies, which sum to 1 per document.
#[derive(Debug, Clone, PartialEq)]
pub struct DocMatrix {
    vocab_size: usize,
    num_docs: usize,
    doc_ptr: Vec<usize>,
    word_idx: Vec<usize>,
    weight: Vec<f64>,
}

impl DocMatrix {
    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn num_docs(&self) -> usize {
        self.num_docs
    }

    /// Offsets into `word_idx`/`weight`, length `num_docs + 1`.
    pub fn doc_ptr(&self) -> &[usize] {
        &self.doc_ptr
    }

    pub fn word_idx(&self) -> &[usize] {
        &self.word_idx
    }

    pub fn weight(&self) -> &[f64] {
        &self.weight
    }

    /// Total number of stored entries.
    pub fn nnz(&self) -> usize {
        self.word_idx.len()
    }

    /// Entry count of the largest document.
    pub fn max_doc_nnz(&self) -> usize {
        self.doc_ptr
            .windows(2)
            .map(|w| w[1] - w[0])
            .max()
            .unwrap_or(0)
    }

    /// Word indices and weights of document `j`.
    pub fn doc(&self, j: usize) -> (&[usize], &[f64]) {
        let lo = self.doc_ptr[j];
        let hi = self.doc_ptr[j + 1];
        (&self.word_idx[lo..hi], &self.weight[lo..hi])
    }
}

/// Builds a [`DocMatrix`] from raw `(doc, word, count)` triples.
///
/// Duplicate `(doc, word)` pairs are summed, each document's entries are
/// sorted by word index, and counts are normalized so every document's
/// weights sum to 1.
///
/// # Errors
/// - [`Error::IndexOutOfRange`] if a document or word index is out of range.
/// - [`Error::InvalidInput`] if a count is not positive and finite.
/// - [`Error::EmptyDocument`] if any document in `[0, num_docs)` receives no
///   entries.
pub fn doc_matrix_from_entries(
    vocab_size: usize,
    num_docs: usize,
    entries: &[(usize, usize, f64)],
) -> Result<DocMatrix> {
    let mut per_doc: Vec<Vec<(usize, f64)>> = vec![Vec::new(); num_docs];
    for &(doc, word, count) in entries {
        if doc >= num_docs {
            return Err(Error::IndexOutOfRange {
                what: "document",
                index: doc,
                limit: num_docs,
            });
        }
        if word >= vocab_size {
            return Err(Error::IndexOutOfRange {
                what: "word",
                index: word,
                limit: vocab_size,
            });
        }
        if !count.is_finite() || count <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "count {count} for (doc {doc}, word {word}) must be positive and finite"
            )));
        }
        per_doc[doc].push((word, count));
    }

    let mut doc_ptr = Vec::with_capacity(num_docs + 1);
    doc_ptr.push(0);
    let mut word_idx = Vec::with_capacity(entries.len());
    let mut weight = Vec::with_capacity(entries.len());
    for (j, doc) in per_doc.iter_mut().enumerate() {
        if doc.is_empty() {
            return Err(Error::EmptyDocument(j));
        }
        doc.sort_unstable_by_key(|&(word, _)| word);
        // Merge duplicates in place, then normalize.
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(doc.len());
        for &(word, count) in doc.iter() {
            match merged.last_mut() {
                Some(last) if last.0 == word => last.1 += count,
                _ => merged.push((word, count)),
            }
        }
        let total: f64 = merged.iter().map(|&(_, c)| c).sum();
        for (word, count) in merged {
            word_idx.push(word);
            weight.push(count / total);
        }
        doc_ptr.push(word_idx.len());
    }

    Ok(DocMatrix {
        vocab_size,
        num_docs,
        doc_ptr,
        word_idx,
        weight,
    })
}

/// Per-worker document assignment.
///
/// Ranges are half-open `(doc_begin, doc_end)` pairs, disjoint, in order, and
/// covering `[0, num_docs)`. A worker's nonzero load never exceeds
/// `ceil(nnz / p) + max_doc_nnz` because document boundaries shift an ideal
/// flat split point by less than one document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionPlan {
    num_workers: usize,
    ranges: Vec<(usize, usize)>,
}

impl PartitionPlan {
    /// Splits the documents described by `doc_ptr` into `num_workers` ranges
    /// of near-equal nonzero count.
    ///
    /// For each worker boundary `k` the ideal flat split point is
    /// `ceil(k * nnz / p)`; the boundary becomes the first document whose
    /// cumulative count reaches that point, so a document straddling the
    /// ideal split goes wholly to the earlier worker.
    ///
    /// # Panics
    /// Panics if `num_workers == 0` or `doc_ptr` is empty.
    pub fn from_doc_ptr(doc_ptr: &[usize], num_workers: usize) -> Self {
        assert!(num_workers >= 1, "at least one worker required");
        assert!(!doc_ptr.is_empty(), "doc_ptr must have length num_docs + 1");
        let num_docs = doc_ptr.len() - 1;
        let nnz = doc_ptr[num_docs] as u128;
        let p = num_workers as u128;

        let mut bounds = Vec::with_capacity(num_workers + 1);
        bounds.push(0);
        for k in 1..num_workers {
            let target = (k as u128 * nnz).div_ceil(p) as usize;
            bounds.push(doc_ptr.partition_point(|&cum| cum < target));
        }
        bounds.push(num_docs);

        let ranges = bounds.windows(2).map(|w| (w[0], w[1])).collect();
        PartitionPlan {
            num_workers,
            ranges,
        }
    }

    pub fn num_workers(&self) -> usize {
        self.num_workers
    }

    /// Half-open `(doc_begin, doc_end)` range per worker.
    pub fn ranges(&self) -> &[(usize, usize)] {
        &self.ranges
    }
}

/// Nonzero-balanced work partition for `matrix` across `num_workers` workers.
///
/// # Panics
/// Panics if `num_workers == 0`.
pub fn partition_nonzeros(matrix: &DocMatrix, num_workers: usize) -> PartitionPlan {
    PartitionPlan::from_doc_ptr(matrix.doc_ptr(), num_workers)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_entries_normalizes_and_sorts() {
        let c = doc_matrix_from_entries(3, 2, &[(0, 1, 1.0), (0, 0, 2.0), (1, 2, 1.0)]).unwrap();
        assert_eq!(c.doc_ptr(), &[0, 2, 3]);
        assert_eq!(c.word_idx(), &[0, 1, 2]);
        assert_eq!(c.weight(), &[2.0 / 3.0, 1.0 / 3.0, 1.0]);
    }

    #[test]
    fn from_entries_merges_duplicates() {
        let c = doc_matrix_from_entries(3, 2, &[(0, 0, 1.0), (0, 0, 1.0), (1, 2, 5.0)]).unwrap();
        assert_eq!(c.doc_ptr(), &[0, 1, 2]);
        assert_eq!(c.word_idx(), &[0, 2]);
        assert_eq!(c.weight(), &[1.0, 1.0]);
    }

    #[test]
    fn from_entries_rejects_empty_document() {
        let err = doc_matrix_from_entries(3, 2, &[(0, 0, 1.0)]).unwrap_err();
        assert!(matches!(err, Error::EmptyDocument(1)));
    }

    #[test]
    fn from_entries_rejects_bad_indices_and_counts() {
        assert!(matches!(
            doc_matrix_from_entries(3, 1, &[(1, 0, 1.0)]).unwrap_err(),
            Error::IndexOutOfRange { index: 1, .. }
        ));
        assert!(matches!(
            doc_matrix_from_entries(3, 1, &[(0, 3, 1.0)]).unwrap_err(),
            Error::IndexOutOfRange { index: 3, .. }
        ));
        assert!(matches!(
            doc_matrix_from_entries(3, 1, &[(0, 0, 0.0)]).unwrap_err(),
            Error::InvalidInput(_)
        ));
    }

    #[test]
    fn weights_sum_to_one_per_document() {
        let entries = [
            (0, 0, 1.0),
            (0, 4, 2.5),
            (0, 2, 0.5),
            (1, 1, 7.0),
            (1, 3, 1.0),
        ];
        let c = doc_matrix_from_entries(5, 2, &entries).unwrap();
        for j in 0..c.num_docs() {
            let (_, weights) = c.doc(j);
            let sum: f64 = weights.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12, "doc {j} sums to {sum}");
        }
    }

    #[test]
    fn partition_straddling_document_goes_to_earlier_worker() {
        let plan = PartitionPlan::from_doc_ptr(&[0, 3, 7, 10], 2);
        assert_eq!(plan.ranges(), &[(0, 2), (2, 3)]);
    }

    #[test]
    fn partition_exact_split_at_document_boundary() {
        let plan = PartitionPlan::from_doc_ptr(&[0, 4, 8], 2);
        assert_eq!(plan.ranges(), &[(0, 1), (1, 2)]);
    }

    #[test]
    fn partition_single_document_cannot_be_split() {
        let plan = PartitionPlan::from_doc_ptr(&[0, 10], 4);
        assert_eq!(plan.ranges(), &[(0, 1), (1, 1), (1, 1), (1, 1)]);
    }

    #[test]
    fn partition_covers_all_documents() {
        let doc_ptr = [0, 2, 2, 9, 12, 13, 20];
        for p in 1..=10 {
            let plan = PartitionPlan::from_doc_ptr(&doc_ptr, p);
            assert_eq!(plan.ranges().len(), p);
            let mut next = 0;
            for &(b, e) in plan.ranges() {
                assert_eq!(b, next);
                assert!(e >= b);
                next = e;
            }
            assert_eq!(next, doc_ptr.len() - 1);
        }
    }

    #[test]
    fn dense_from_vec_validates() {
        assert!(DenseMatrix::from_vec(2, 2, vec![1.0; 3]).is_err());
        assert!(DenseMatrix::from_vec(1, 2, vec![1.0, f64::NAN]).is_err());
        let m = DenseMatrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(m.at(1, 0), 3.0);
        assert_eq!(m.row(0), &[1.0, 2.0]);
    }
}
