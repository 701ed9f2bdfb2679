//! Execution mode for the data-parallel kernels.
//!
//! Every parallel kernel in the crate splits work over independent output
//! elements and reduces each element in a fixed sequential order, so results
//! do not depend on the thread count. The sequential path is still the
//! reference for bit-reproducibility and is the default until a caller opts
//! in with [`set_threads`].
//!
//! Without the `parallel` feature every kernel runs sequentially and
//! [`set_threads`] only records the request.

use std::sync::atomic::{AtomicUsize, Ordering};

/// Environment variable read by [`init_from_env`].
pub const THREADS_ENV: &str = "TUCKERFUSE_THREADS";

static THREADS: AtomicUsize = AtomicUsize::new(1);

/// Sets the worker count. `0` means "all available cores"; `1` forces the
/// sequential path.
pub fn set_threads(n: usize) {
    let n = if n == 0 {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    } else {
        n
    };
    THREADS.store(n, Ordering::SeqCst);
}

pub fn threads() -> usize {
    THREADS.load(Ordering::SeqCst)
}

/// Reads [`THREADS_ENV`]; unset or unparsable leaves the current setting.
pub fn init_from_env() {
    if let Some(n) = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
    {
        set_threads(n);
    }
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && threads() > 1
}

#[cfg(feature = "parallel")]
fn pool() -> &'static rayon::ThreadPool {
    use std::sync::OnceLock;
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let n = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .expect("rayon pool")
    })
}

/// Calls `f(index, chunk)` for each `chunk_len`-sized piece of `data`.
pub fn for_each_chunk<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    let chunk_len = chunk_len.max(1);
    #[cfg(feature = "parallel")]
    if is_parallel() {
        use rayon::prelude::*;
        pool().install(|| data.par_chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c)));
        return;
    }
    data.chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
}

/// Maps `0..n` through `f`, preserving order.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if is_parallel() {
        use rayon::prelude::*;
        return pool().install(|| (0..n).into_par_iter().map(&f).collect());
    }
    (0..n).map(f).collect()
}
