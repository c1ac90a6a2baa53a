//! Data-parallel execution helpers.
//!
//! All hot loops in this crate go through the helpers below. With the
//! `parallel` feature (default) they fan out over rayon; without it, or with
//! the thread budget set to 1, they run as plain sequential loops. Every
//! parallel site writes disjoint output slots or reduces partials in a fixed
//! order, so results are bit-identical regardless of thread count.

use std::sync::atomic::{AtomicUsize, Ordering};

/// Global thread budget. 0 means "use whatever the pool provides".
static MAX_THREADS: AtomicUsize = AtomicUsize::new(1);

/// Set the number of worker threads used by parallel helpers.
///
/// 1 forces sequential execution (the default, for reproducibility of
/// command runs); 0 lets rayon pick. Builds without the `parallel` feature
/// always run sequentially.
pub fn set_max_threads(n: usize) {
    MAX_THREADS.store(n, Ordering::SeqCst);
    #[cfg(feature = "parallel")]
    if n > 1 {
        // Best effort: the global pool can only be sized once per process.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
}

pub fn max_threads() -> usize {
    MAX_THREADS.load(Ordering::SeqCst)
}

#[cfg(feature = "parallel")]
fn parallel_enabled() -> bool {
    let n = max_threads();
    (n == 0 || n > 1) && rayon::current_num_threads() > 1
}

/// Apply `f(chunk_index, chunk)` over consecutive chunks of `data`.
#[cfg(feature = "parallel")]
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    if parallel_enabled() {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    } else {
        for (i, c) in data.chunks_mut(chunk).enumerate() {
            f(i, c);
        }
    }
}

#[cfg(not(feature = "parallel"))]
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    F: Fn(usize, &mut [T]),
{
    for (i, c) in data.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}

/// Collect `f(0..n)` into a Vec, preserving index order.
#[cfg(feature = "parallel")]
pub fn map_collect<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Send + Sync,
{
    if parallel_enabled() {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    } else {
        (0..n).map(f).collect()
    }
}

#[cfg(not(feature = "parallel"))]
pub fn map_collect<R, F>(n: usize, f: F) -> Vec<R>
where
    F: Fn(usize) -> R,
{
    (0..n).map(f).collect()
}
