//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature, work is spread with rayon. Without it (or when
//! the process-wide mode is [`Parallelism::Sequential`]), the same closures run
//! in a plain loop. Results are always collected in index order, so outputs do
//! not depend on the thread count.

use std::sync::atomic::{AtomicU8, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Parallelism {
    Sequential,
    #[default]
    Auto,
}

static MODE: AtomicU8 = AtomicU8::new(1);

/// Sets the process-wide mode used by tensor kernels.
pub fn set_parallelism(mode: Parallelism) {
    MODE.store(mode as u8, Ordering::Relaxed);
}

pub fn parallelism() -> Parallelism {
    match MODE.load(Ordering::Relaxed) {
        0 => Parallelism::Sequential,
        _ => Parallelism::Auto,
    }
}

/// Whether parallel execution is compiled in and currently enabled.
pub fn enabled() -> bool {
    cfg!(feature = "parallel") && parallelism() == Parallelism::Auto
}

/// Evaluates `f(0..n)` and returns the results in index order.
pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if enabled() && n > 1 {
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Applies `f` to consecutive `chunk`-sized pieces of `out`, passing the chunk index.
pub fn for_each_chunk<F>(out: &mut [f64], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if chunk == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if enabled() && out.len() >= PAR_MIN_ELEMS && out.len() > chunk {
        out.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Runs `f` with at most `threads` workers (`0` keeps the default pool).
pub fn with_threads<T, F>(threads: usize, f: F) -> T
where
    T: Send,
    F: FnOnce() -> T + Send,
{
    #[cfg(feature = "parallel")]
    if threads > 0 {
        if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
            return pool.install(f);
        }
    }
    let _ = threads;
    f()
}

// Below this many output elements a kernel stays on the calling thread.
#[cfg(feature = "parallel")]
const PAR_MIN_ELEMS: usize = 4096;
