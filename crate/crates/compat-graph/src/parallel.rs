//! Execution control for the data-parallel inner loops.
//!
//! All parallel work in this crate runs on one process-wide rayon pool whose
//! size is capped by the `COMPAT_GRAPH_THREADS` environment variable
//! (unset or `0` means automatic). Work is always partitioned into
//! fixed-size blocks, so results do not depend on the number of threads.

/// Environment variable capping internal parallelism (0 = auto).
pub const THREADS_ENV: &str = "COMPAT_GRAPH_THREADS";

#[cfg(feature = "parallel")]
mod imp {
    use std::sync::OnceLock;

    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();

    fn configured_threads() -> usize {
        std::env::var(super::THREADS_ENV)
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .unwrap_or(0)
    }

    pub fn pool() -> &'static rayon::ThreadPool {
        POOL.get_or_init(|| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(configured_threads())
                .build()
                .expect("failed to build worker thread pool")
        })
    }

    pub fn run<R: Send>(f: impl FnOnce() -> R + Send) -> R {
        pool().install(f)
    }

    pub fn max_threads() -> usize {
        pool().current_num_threads()
    }
}

#[cfg(not(feature = "parallel"))]
mod imp {
    pub fn run<R: Send>(f: impl FnOnce() -> R + Send) -> R {
        f()
    }

    pub fn max_threads() -> usize {
        1
    }
}

pub(crate) use imp::run;

/// Number of worker threads parallel sections may use (1 in sequential builds).
pub fn max_threads() -> usize {
    imp::max_threads()
}
