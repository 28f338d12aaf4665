//! Data-parallel helpers.
//!
//! With the `parallel` feature (default) the batch loops fan out over rayon;
//! without it, or when [`set_execution`] selects [`Execution::Sequential`],
//! the same closures run on the calling thread. Results are always collected
//! in index order and reductions use a fixed chunking that does not depend on
//! the thread count, so both paths produce bitwise-identical outputs.

use std::sync::atomic::{AtomicU8, Ordering};

/// Records per reduction chunk. Fixed so summation order is stable.
pub const REDUCE_CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    Parallel,
}

static EXECUTION: AtomicU8 = AtomicU8::new(1);

pub fn set_execution(mode: Execution) {
    EXECUTION.store(matches!(mode, Execution::Parallel) as u8, Ordering::Relaxed);
}

pub fn execution() -> Execution {
    if cfg!(feature = "parallel") && EXECUTION.load(Ordering::Relaxed) == 1 {
        Execution::Parallel
    } else {
        Execution::Sequential
    }
}

/// Worker threads the current execution mode will use.
pub fn current_threads() -> usize {
    match execution() {
        #[cfg(feature = "parallel")]
        Execution::Parallel => rayon::current_num_threads(),
        _ => 1,
    }
}

/// Caps the global pool size. Returns false if the pool was already built.
pub fn init_threads(threads: usize) -> bool {
    if threads <= 1 {
        set_execution(Execution::Sequential);
    }
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build_global()
            .is_ok()
    }
    #[cfg(not(feature = "parallel"))]
    {
        true
    }
}

/// Reads `CHATS_LAB_THREADS` and applies it, if set.
pub fn init_from_env() {
    if let Some(n) = std::env::var("CHATS_LAB_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
    {
        init_threads(n);
    }
}

/// `(0..n).map(f).collect()`, possibly in parallel, always in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match execution() {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}

/// Sums per-item vectors of length `dim` in a thread-count independent order:
/// items are folded sequentially within chunks of [`REDUCE_CHUNK`], then the
/// chunk partials are added left to right.
pub fn sum_vectors<F>(n: usize, dim: usize, f: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    let chunks = n.div_ceil(REDUCE_CHUNK);
    let partials = map_indexed(chunks, |c| {
        let mut acc = vec![0.0; dim];
        let end = ((c + 1) * REDUCE_CHUNK).min(n);
        for i in c * REDUCE_CHUNK..end {
            f(i, &mut acc);
        }
        acc
    });
    let mut total = vec![0.0; dim];
    for p in partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}
