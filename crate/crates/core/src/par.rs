//! Compatibility layer for rayon/sequential execution.
//!
//! With the `parallel` feature (default) these helpers fan work out over the
//! rayon pool. Without it they run on the calling thread. Every helper returns
//! results in input order, so any reduction done by the caller afterwards is
//! independent of how many workers ran.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `0..n`, returning results in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Maps `f` over a slice, returning results in slice order.
pub fn map_slice<S, T, F>(items: &[S], f: F) -> Vec<T>
where
    S: Sync,
    T: Send,
    F: Fn(&S) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Runs `f` on each `chunk`-sized mutable row block of `data` together with
/// the index of its first row.
pub fn for_each_row_block<F>(data: &mut [f64], row_len: usize, rows_per_block: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    let block = (row_len * rows_per_block).max(1);
    #[cfg(feature = "parallel")]
    {
        data.par_chunks_mut(block)
            .enumerate()
            .for_each(|(b, chunk)| f(b * rows_per_block, chunk));
    }
    #[cfg(not(feature = "parallel"))]
    {
        data.chunks_mut(block)
            .enumerate()
            .for_each(|(b, chunk)| f(b * rows_per_block, chunk));
    }
}

/// Number of worker threads the helpers above will use.
pub fn workers() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}
