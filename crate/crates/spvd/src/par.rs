//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default), loops over independent output
//! slots run on the rayon thread pool. Every parallel site writes disjoint
//! output regions and keeps per-slot arithmetic order identical to the
//! sequential path, so results are bitwise equal with the feature on or off.
//! The `*_seq` variants are always available for benchmarking.

/// Map over mutable chunks of `out`, one chunk per index.
pub fn for_each_chunk<T: Send, F>(out: &mut [T], chunk: usize, f: F)
where
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        out.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    for_each_chunk_seq(out, chunk, f);
}

/// Sequential version of [`for_each_chunk`].
pub fn for_each_chunk_seq<T, F>(out: &mut [T], chunk: usize, f: F)
where
    F: Fn(usize, &mut [T]),
{
    for (i, c) in out.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}

/// Collect `n` values, one per index.
pub fn map_collect<T: Send, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    map_collect_seq(n, f)
}

/// Sequential version of [`map_collect`].
pub fn map_collect_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}
