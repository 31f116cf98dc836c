//! Deterministic data parallelism.
//!
//! Work is split into a fixed number of contiguous chunks decided by the
//! configured thread count, never by the runtime pool size. Each chunk is
//! processed sequentially and chunk results are merged in chunk order, so
//! floating-point reductions are bit-stable for a given `threads` value
//! regardless of how rayon schedules the chunks.

use rayon::prelude::*;
use std::sync::atomic::{AtomicUsize, Ordering};

static CONFIGURED_THREADS: AtomicUsize = AtomicUsize::new(0);

/// Set the chunking width used by [`map_chunked`]. Zero means "one chunk".
pub fn set_threads(threads: usize) {
    CONFIGURED_THREADS.store(threads, Ordering::SeqCst);
}

pub fn threads() -> usize {
    CONFIGURED_THREADS.load(Ordering::SeqCst).max(1)
}

/// Contiguous index ranges covering `0..len`, one per configured thread.
pub fn chunk_ranges(len: usize) -> Vec<std::ops::Range<usize>> {
    let n = threads().min(len.max(1));
    let base = len / n;
    let rem = len % n;
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    for i in 0..n {
        let size = base + usize::from(i < rem);
        out.push(start..start + size);
        start += size;
    }
    out
}

/// Apply `f` to every index in `0..len` in parallel chunks, returning results
/// in index order.
pub fn map_chunked<T: Send, F: Fn(usize) -> T + Sync>(len: usize, f: F) -> Vec<T> {
    let ranges = chunk_ranges(len);
    let mut parts: Vec<Vec<T>> = ranges
        .into_par_iter()
        .map(|r| r.map(&f).collect())
        .collect();
    let mut out = Vec::with_capacity(len);
    for part in parts.iter_mut() {
        out.append(part);
    }
    out
}

/// Fold every chunk sequentially with `fold`, then merge the per-chunk
/// accumulators in chunk order with `merge`.
pub fn fold_chunked<A, F, M>(len: usize, init: impl Fn() -> A + Sync, fold: F, merge: M) -> A
where
    A: Send,
    F: Fn(&mut A, usize) + Sync,
    M: Fn(A, A) -> A,
{
    let ranges = chunk_ranges(len);
    let parts: Vec<A> = ranges
        .into_par_iter()
        .map(|r| {
            let mut acc = init();
            for i in r {
                fold(&mut acc, i);
            }
            acc
        })
        .collect();
    let mut iter = parts.into_iter();
    let first = iter.next().unwrap_or_else(init);
    iter.fold(first, merge)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges_cover_everything_once() {
        set_threads(3);
        let ranges = chunk_ranges(10);
        let mut seen = vec![false; 10];
        for r in ranges {
            for i in r {
                assert!(!seen[i]);
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn map_preserves_order() {
        set_threads(4);
        let out = map_chunked(17, |i| i * 2);
        assert_eq!(out, (0..17).map(|i| i * 2).collect::<Vec<_>>());
    }

    #[test]
    fn fold_is_thread_count_stable() {
        set_threads(2);
        let a = fold_chunked(100, || 0u64, |acc, i| *acc += i as u64, |x, y| x + y);
        let b = fold_chunked(100, || 0u64, |acc, i| *acc += i as u64, |x, y| x + y);
        assert_eq!(a, b);
        assert_eq!(a, 4950);
    }
}
