//! Kernel thread-pool control.

use std::env;

/// Environment variable capping kernel parallelism.
pub const THREADS_ENV: &str = "TRILEVEL_THREADS";

/// Thread count from `TRILEVEL_THREADS`, defaulting to the machine's cores.
pub fn threads_from_env() -> usize {
    env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}

/// Runs `f` inside a dedicated pool of `threads` workers.
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    match rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
    {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}
