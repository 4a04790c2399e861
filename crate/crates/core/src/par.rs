//! Data-parallel helpers.
//!
//! With the `parallel` feature the closures run on the rayon pool, otherwise
//! sequentially. Results are always collected in index order and every reduction
//! happens afterwards on the calling thread, so outputs are bit-identical in both
//! modes and for any thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Fixed batch chunk used for gradient partial sums. Independent of thread count.
pub const CHUNK: usize = 4;

/// Evaluates `f(i)` for `i in 0..n`, returning results in index order.
pub fn map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
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

/// Calls `f(i, chunk)` on consecutive `chunk_len`-sized pieces of `data`.
pub fn for_each_chunk_mut<F>(data: &mut [f64], chunk_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if chunk_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        data.chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
}

/// Splits `0..n` into fixed chunks of [`CHUNK`], maps each chunk range, and
/// returns the per-chunk results in order.
pub fn map_chunks<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(std::ops::Range<usize>) -> T + Sync + Send,
{
    let chunks = n.div_ceil(CHUNK);
    map(chunks, |c| f(c * CHUNK..((c + 1) * CHUNK).min(n)))
}
