//! Execution strategy: rayon data-parallel loops with a sequential
//! fallback when the `parallel` feature is disabled.
//!
//! Every helper here is deterministic: parallel maps preserve input
//! order and reductions over the mapped results are performed by the
//! caller in index order, so outputs are bit-identical with and without
//! the feature.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map over items, in parallel when available. Output order matches
/// input order.
pub fn par_map<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.into_iter().map(f).collect()
    }
}

/// Map over an index range, in parallel when available.
pub fn par_map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
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

/// Run `f` over mutable row chunks of `data` (each of `chunk_len`
/// elements), in parallel when available. Rows are independent so the
/// result does not depend on scheduling.
pub fn par_chunks_mut<F>(data: &mut [f64], chunk_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        data.chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
    }
}

/// Configure the global worker pool size. A no-op without the
/// `parallel` feature or if a pool already exists.
pub fn configure_threads(n: usize) {
    #[cfg(feature = "parallel")]
    {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = n;
    }
}

/// Whether the parallel execution path is compiled in.
pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel")
}
