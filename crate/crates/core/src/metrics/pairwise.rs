//! Blocked all-pairs kernel over per-pixel mean squared distances.
//!
//! Rows are split into fixed blocks that run in parallel; every row
//! accumulates its columns in ascending order, so results do not depend on
//! the thread count.

use rayon::prelude::*;

use crate::Scalar;

const ROW_BLOCK: usize = 32;
const COL_TILE: usize = 64;

/// Sum and minimum of one row of the distance matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct RowStats {
    pub sum: f64,
    pub min: f64,
}

/// `(1/P)·Σ_p (a_p − b_p)²`, accumulated in `f64`.
#[inline]
pub(crate) fn mean_sq_dist<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x.as_f64() - y.as_f64();
        acc += d * d;
    }
    acc / a.len() as f64
}

/// Row statistics of the `rows × cols` distance matrix between the images
/// in `rows` and `cols` (both flat, `ppi` pixels per image). With
/// `skip_diagonal`, pair `(i, i)` is left out; the two buffers are then
/// expected to be the same set.
pub(crate) fn row_stats<T: Scalar>(rows: &[T], cols: &[T], ppi: usize, skip_diagonal: bool) -> Vec<RowStats> {
    let nr = rows.len() / ppi;
    let nc = cols.len() / ppi;
    let blocks: Vec<usize> = (0..nr).step_by(ROW_BLOCK).collect();
    let per_block: Vec<Vec<RowStats>> = blocks
        .par_iter()
        .map(|&r0| {
            let r1 = (r0 + ROW_BLOCK).min(nr);
            let mut stats = vec![RowStats { sum: 0.0, min: f64::INFINITY }; r1 - r0];
            for c0 in (0..nc).step_by(COL_TILE) {
                let c1 = (c0 + COL_TILE).min(nc);
                for (i, st) in (r0..r1).zip(stats.iter_mut()) {
                    let a = &rows[i * ppi..(i + 1) * ppi];
                    for j in c0..c1 {
                        if skip_diagonal && i == j {
                            continue;
                        }
                        let d = mean_sq_dist(a, &cols[j * ppi..(j + 1) * ppi]);
                        st.sum += d;
                        if d < st.min {
                            st.min = d;
                        }
                    }
                }
            }
            stats
        })
        .collect();
    per_block.into_iter().flatten().collect()
}
