//! Row-level parallelism helpers.
//!
//! Every parallel loop in this crate splits work over independent output
//! rows; the per-row arithmetic (and its summation order) is identical to
//! the sequential path, so outputs are bit-identical either way.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

// Rayon spawn/sync overhead makes tiny loops slower in parallel. The
// threshold is on estimated scalar ops for the whole loop.
#[cfg(feature = "parallel")]
const PARALLEL_THRESHOLD: usize = 16_384;

/// Fills `out`, treated as `rows` chunks of `row_len`, by calling
/// `fill(row_index, row_slice)` for each row. `work` is an estimate of the
/// total scalar-op count and decides whether splitting is worthwhile.
pub(crate) fn fill_rows<F>(out: &mut [f32], rows: usize, row_len: usize, work: usize, fill: F)
where
    F: Fn(usize, &mut [f32]) + Sync + Send,
{
    debug_assert_eq!(out.len(), rows * row_len);
    #[cfg(feature = "parallel")]
    {
        if work >= PARALLEL_THRESHOLD && rows > 1 {
            out.par_chunks_mut(row_len)
                .enumerate()
                .for_each(|(i, row)| fill(i, row));
            return;
        }
    }
    let _ = work;
    for (i, row) in out.chunks_mut(row_len).enumerate() {
        fill(i, row);
    }
}

/// Same as [`fill_rows`] but hands out blocks of up to `block_rows` rows:
/// `fill(first_row, chunk)` where `chunk` holds whole rows. Lets kernels
/// keep per-block scratch while staying deterministic.
pub(crate) fn fill_row_blocks<F>(
    out: &mut [f32],
    rows: usize,
    row_len: usize,
    block_rows: usize,
    work: usize,
    fill: F,
) where
    F: Fn(usize, &mut [f32]) + Sync + Send,
{
    debug_assert_eq!(out.len(), rows * row_len);
    let chunk = block_rows.max(1) * row_len;
    #[cfg(feature = "parallel")]
    {
        if work >= PARALLEL_THRESHOLD && rows > block_rows {
            out.par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(b, c)| fill(b * block_rows, c));
            return;
        }
    }
    let _ = work;
    for (b, c) in out.chunks_mut(chunk).enumerate() {
        fill(b * block_rows.max(1), c);
    }
}
