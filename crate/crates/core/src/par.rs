//! Node-parallel helpers. With the `parallel` feature the closures run on the
//! rayon pool, otherwise they run in order on the calling thread. Every helper
//! produces identical results in both modes: reductions are always folded
//! sequentially over per-item partials.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Number of worker threads the helpers will use.
pub fn num_threads() -> usize {
    #[cfg(feature = "parallel")]
    return rayon::current_num_threads();

    #[cfg(not(feature = "parallel"))]
    return 1;
}

/// Calls `f(index, chunk)` for each `width`-sized chunk of `out`.
pub fn for_each_chunk<T, F>(out: &mut [T], width: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    if width == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    out.par_chunks_mut(width)
        .enumerate()
        .for_each(|(i, c)| f(i, c));

    #[cfg(not(feature = "parallel"))]
    out.chunks_mut(width).enumerate().for_each(|(i, c)| f(i, c));
}

/// Like [`for_each_chunk`] over two buffers that share the chunk index.
pub fn for_each_chunk2<A, B, F>(a: &mut [A], wa: usize, b: &mut [B], wb: usize, f: F)
where
    A: Send,
    B: Send,
    F: Fn(usize, &mut [A], &mut [B]) + Send + Sync,
{
    if wa == 0 || wb == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    a.par_chunks_mut(wa)
        .zip(b.par_chunks_mut(wb))
        .enumerate()
        .for_each(|(i, (x, y))| f(i, x, y));

    #[cfg(not(feature = "parallel"))]
    a.chunks_mut(wa)
        .zip(b.chunks_mut(wb))
        .enumerate()
        .for_each(|(i, (x, y))| f(i, x, y));
}

/// Three-buffer variant of [`for_each_chunk`].
pub fn for_each_chunk3<A, B, C, F>(
    a: &mut [A],
    wa: usize,
    b: &mut [B],
    wb: usize,
    c: &mut [C],
    wc: usize,
    f: F,
) where
    A: Send,
    B: Send,
    C: Send,
    F: Fn(usize, &mut [A], &mut [B], &mut [C]) + Send + Sync,
{
    if wa == 0 || wb == 0 || wc == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    a.par_chunks_mut(wa)
        .zip(b.par_chunks_mut(wb))
        .zip(c.par_chunks_mut(wc))
        .enumerate()
        .for_each(|(i, ((x, y), z))| f(i, x, y, z));

    #[cfg(not(feature = "parallel"))]
    a.chunks_mut(wa)
        .zip(b.chunks_mut(wb))
        .zip(c.chunks_mut(wc))
        .enumerate()
        .for_each(|(i, ((x, y), z))| f(i, x, y, z));
}

/// Maps `0..n` to a vector, in parallel when enabled.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    return (0..n).into_par_iter().map(f).collect();

    #[cfg(not(feature = "parallel"))]
    return (0..n).map(f).collect();
}

/// Deterministic sum of `f(i)` over `0..n`: partials may be computed in
/// parallel but are always added left to right.
pub fn sum_range<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Send + Sync,
{
    map_range(n, f).into_iter().sum()
}
