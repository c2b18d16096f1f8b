//! Execution helpers behind the `parallel` feature flag.
//!
//! Every call site partitions its output into disjoint chunks and computes
//! each chunk with a fixed-order inner loop, so the parallel and sequential
//! paths produce bit-identical results. The `*_seq` variants are always
//! compiled; the benches use them to compare both paths in one build.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Apply `f(chunk_index, chunk)` over disjoint `chunk_len` chunks of `data`.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        for_each_chunk_mut_seq(data, chunk_len, f);
    }
}

/// Sequential twin of [`for_each_chunk_mut`].
pub fn for_each_chunk_mut_seq<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    F: Fn(usize, &mut [T]),
{
    for (i, c) in data.chunks_mut(chunk_len).enumerate() {
        f(i, c);
    }
}

/// Collect `f(0), f(1), ..., f(n-1)` in index order.
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_indexed_seq(n, f)
    }
}

/// Sequential twin of [`map_indexed`].
pub fn map_indexed_seq<R, F>(n: usize, f: F) -> Vec<R>
where
    F: Fn(usize) -> R,
{
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunked_matches_sequential() {
        let mut a = vec![0u64; 1000];
        let mut b = vec![0u64; 1000];
        let f = |i: usize, c: &mut [u64]| {
            for (j, v) in c.iter_mut().enumerate() {
                *v = (i * 31 + j) as u64;
            }
        };
        for_each_chunk_mut(&mut a, 7, f);
        for_each_chunk_mut_seq(&mut b, 7, f);
        assert_eq!(a, b);
    }

    #[test]
    fn map_preserves_order() {
        assert_eq!(map_indexed(5, |i| i * i), vec![0, 1, 4, 9, 16]);
    }
}
