//! Worker-count control for per-sample parallelism.
//!
//! `AIA_THREADS` caps the number of workers; `0` selects strict
//! single-threaded execution. Results are always gathered in input order
//! and reduced with [`deterministic_sum`](crate::numerics::deterministic_sum),
//! so the worker count never changes any output bit.

use std::sync::OnceLock;

use rayon::prelude::*;
use rayon::ThreadPool;

pub const THREADS_ENV: &str = "AIA_THREADS";

enum Mode {
    Sequential,
    Pool(ThreadPool),
    Global,
}

fn mode() -> &'static Mode {
    static MODE: OnceLock<Mode> = OnceLock::new();
    MODE.get_or_init(|| match std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        Some(0) => Mode::Sequential,
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n).build().map_or(Mode::Global, Mode::Pool),
        None => Mode::Global,
    })
}

/// True when `AIA_THREADS=0`.
pub fn is_strict() -> bool {
    matches!(mode(), Mode::Sequential)
}

/// `items.map(f)` with results in input order.
pub fn map_ordered<T, R, F>(items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    match mode() {
        Mode::Sequential => items.into_iter().map(f).collect(),
        Mode::Pool(pool) => pool.install(|| items.into_par_iter().map(f).collect()),
        Mode::Global => items.into_par_iter().map(f).collect(),
    }
}
