//! Row-level parallel helpers.
//!
//! Each closure owns one output row (or one output item), so the result of a
//! loop never depends on how work is scheduled. Loops whose total work is
//! small run inline: handing a job to the pool costs microseconds, which
//! dominates e.g. a Sinkhorn iteration on a 6x6 problem.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, thiserror::Error)]
#[error("failed to build thread pool: {0}")]
pub struct PoolError(String);

/// Below this many units of work (roughly, inner-loop steps) a loop is not
/// worth distributing.
pub const PAR_MIN_WORK: usize = 1 << 14;

#[cfg(feature = "parallel")]
fn worth_splitting(items: usize, cost_per_item: usize) -> bool {
    items > 1 && items.saturating_mul(cost_per_item.max(1)) >= PAR_MIN_WORK
}

/// Call `f(row_index, row)` for every `width`-sized chunk of `data`.
/// `row_cost` estimates the work done per row.
pub fn for_each_row_mut<T, F>(data: &mut [T], width: usize, row_cost: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    if width == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if worth_splitting(data.len() / width, row_cost) {
        data.par_chunks_mut(width)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
        return;
    }
    let _ = row_cost;
    data.chunks_mut(width)
        .enumerate()
        .for_each(|(i, row)| f(i, row));
}

/// Evaluate `f` on `0..n` and collect the results in index order.
/// `item_cost` estimates the work done per item.
pub fn map_range<T, F>(n: usize, item_cost: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if worth_splitting(n, item_cost) {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = item_cost;
    (0..n).map(f).collect()
}

/// Run `f` on a dedicated pool of `threads` workers, or on the global pool
/// when `threads` is `None`. Without the `parallel` feature `f` simply runs
/// on the calling thread.
pub fn with_threads<R, F>(threads: Option<usize>, f: F) -> Result<R, PoolError>
where
    R: Send,
    F: FnOnce() -> R + Send,
{
    #[cfg(feature = "parallel")]
    {
        match threads {
            None => Ok(f()),
            Some(n) => {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(n.max(1))
                    .build()
                    .map_err(|e| PoolError(e.to_string()))?;
                Ok(pool.install(f))
            }
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        Ok(f())
    }
}

/// Whether the crate was built with rayon support.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
