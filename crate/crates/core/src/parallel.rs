//! Fork-join execution and disjoint mutable views for the kernels.
//!
//! Workers never share mutable state: each one receives a [`ColumnBand`]
//! (its slice of every matrix row) or a contiguous row chunk, carved out with
//! `split_at_mut` so the disjointness is checked by the borrow system rather
//! than by unsafe code. Results are collected in worker order, which keeps
//! every reduction deterministic regardless of scheduling.

use crate::matrix::DenseMatrix;

/// Runs one closure invocation per task on its own thread (task 0 runs on the
/// calling thread) and returns the results in task order.
pub(crate) fn run_partitioned<T, R, F>(tasks: Vec<T>, work: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(usize, T) -> R + Sync,
{
    let mut tasks = tasks.into_iter();
    let Some(first) = tasks.next() else {
        return Vec::new();
    };
    let work = &work;
    std::thread::scope(|scope| {
        let handles: Vec<_> = tasks
            .enumerate()
            .map(|(i, task)| scope.spawn(move || work(i + 1, task)))
            .collect();
        let mut results = Vec::with_capacity(handles.len() + 1);
        results.push(work(0, first));
        for handle in handles {
            results.push(handle.join().expect("worker thread panicked"));
        }
        results
    })
}

/// A worker's mutable window onto columns `[begin, end)` of a row-major
/// matrix: one subslice per matrix row, each of length `end - begin`.
pub(crate) struct ColumnBand<'a> {
    pub begin: usize,
    pub rows: Vec<&'a mut [f64]>,
}

/// Splits `matrix` into per-range column bands. `ranges` must be ordered,
/// contiguous, and cover `[0, cols)` exactly (empty ranges are fine).
pub(crate) fn column_bands<'a>(
    matrix: &'a mut DenseMatrix,
    ranges: &[(usize, usize)],
) -> Vec<ColumnBand<'a>> {
    let cols = matrix.cols();
    let rows = matrix.rows();
    let mut bands: Vec<ColumnBand<'a>> = ranges
        .iter()
        .map(|&(begin, _)| ColumnBand {
            begin,
            rows: Vec::with_capacity(rows),
        })
        .collect();

    let mut rest = matrix.data_mut();
    for _ in 0..rows {
        let (mut row, tail) = rest.split_at_mut(cols);
        rest = tail;
        let mut col = 0;
        for (band, &(begin, end)) in bands.iter_mut().zip(ranges) {
            assert_eq!(col, begin, "ranges must be contiguous from column 0");
            let (piece, row_tail) = row.split_at_mut(end - begin);
            row = row_tail;
            band.rows.push(piece);
            col = end;
        }
        assert_eq!(col, cols, "ranges must cover every column");
    }
    bands
}

/// Splits the rows of a row-major matrix into per-range contiguous chunks
/// (`ranges` index rows here, with the same coverage requirements as
/// [`column_bands`]).
pub(crate) fn row_chunks<'a>(
    matrix: &'a mut DenseMatrix,
    ranges: &[(usize, usize)],
) -> Vec<&'a mut [f64]> {
    let cols = matrix.cols();
    let rows = matrix.rows();
    let mut chunks = Vec::with_capacity(ranges.len());
    let mut rest = matrix.data_mut();
    let mut row = 0;
    for &(begin, end) in ranges {
        assert_eq!(row, begin, "ranges must be contiguous from row 0");
        let (chunk, tail) = rest.split_at_mut((end - begin) * cols);
        rest = tail;
        chunks.push(chunk);
        row = end;
    }
    assert_eq!(row, rows, "ranges must cover every row");
    chunks
}

/// Splits `[0, n)` into `pieces` contiguous ranges whose lengths differ by at
/// most one (earlier ranges get the remainder).
pub(crate) fn even_ranges(n: usize, pieces: usize) -> Vec<(usize, usize)> {
    assert!(pieces >= 1);
    let base = n / pieces;
    let extra = n % pieces;
    let mut ranges = Vec::with_capacity(pieces);
    let mut begin = 0;
    for k in 0..pieces {
        let len = base + usize::from(k < extra);
        ranges.push((begin, begin + len));
        begin += len;
    }
    ranges
}
