//! Execution mode: deterministic single-threaded reference mode, or a
//! rayon pool for the heavy kernels.
//!
//! Parallel kernels only split work over independent outputs and reduce
//! partial results in a fixed order, so both modes produce identical bits.

use std::sync::{Arc, RwLock};

use rayon::{ThreadPool, ThreadPoolBuilder};

pub const THREADS_ENV: &str = "FUSIONNET_THREADS";

static POOL: RwLock<Option<Arc<ThreadPool>>> = RwLock::new(None);

/// Sets the worker count. `0` selects reference mode.
pub fn set_threads(threads: usize) {
    let pool = if threads == 0 {
        None
    } else {
        ThreadPoolBuilder::new().num_threads(threads).build().ok().map(Arc::new)
    };
    *POOL.write().unwrap_or_else(|e| e.into_inner()) = pool;
}

/// Reads `FUSIONNET_THREADS`; unset or unparsable means reference mode.
pub fn init_from_env() -> usize {
    let threads = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .unwrap_or(0);
    set_threads(threads);
    threads
}

pub fn threads() -> usize {
    POOL.read()
        .unwrap_or_else(|e| e.into_inner())
        .as_ref()
        .map_or(0, |p| p.current_num_threads())
}

pub fn is_reference() -> bool {
    threads() == 0
}

pub(crate) fn pool() -> Option<Arc<ThreadPool>> {
    POOL.read().unwrap_or_else(|e| e.into_inner()).clone()
}

/// Runs `f(i)` for every `i < n` and returns results in index order.
pub(crate) fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    match pool() {
        Some(pool) if n > 1 => {
            use rayon::prelude::*;
            pool.install(|| (0..n).into_par_iter().map(&f).collect())
        }
        _ => (0..n).map(f).collect(),
    }
}
