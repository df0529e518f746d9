//! Data-parallel helpers over disjoint chunks; sequential without the
//! `parallel` feature.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

pub(crate) fn chunks_mut<T: Send>(buf: &mut [T], chunk: usize, f: impl Fn(usize, &mut [T]) + Sync + Send) {
    #[cfg(feature = "parallel")]
    buf.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    #[cfg(not(feature = "parallel"))]
    buf.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Walks three equally chunked buffers in lockstep.
pub(crate) fn chunks3_mut<T: Send>(
    a: &mut [T],
    b: &mut [T],
    c: &mut [T],
    chunk: usize,
    f: impl Fn(usize, &mut [T], &mut [T], &mut [T]) + Sync + Send,
) {
    #[cfg(feature = "parallel")]
    a.par_chunks_mut(chunk)
        .zip(b.par_chunks_mut(chunk))
        .zip(c.par_chunks_mut(chunk))
        .enumerate()
        .for_each(|(i, ((x, y), z))| f(i, x, y, z));
    #[cfg(not(feature = "parallel"))]
    a.chunks_mut(chunk)
        .zip(b.chunks_mut(chunk))
        .zip(c.chunks_mut(chunk))
        .enumerate()
        .for_each(|(i, ((x, y), z))| f(i, x, y, z));
}
