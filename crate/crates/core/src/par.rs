//! Execution strategy for the data-parallel inner loops.
//!
//! With the `parallel` feature (default) work is spread over the rayon pool;
//! without it every helper runs sequentially. Both paths produce identical,
//! order-preserving output, so callers never observe which one ran.

use std::ops::Range;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    #[cfg_attr(not(feature = "parallel"), default)]
    Sequential,
    #[cfg(feature = "parallel")]
    #[default]
    Parallel,
}

/// Maps `f` over `0..n`, returning results in index order.
pub fn map_indexed<T, F>(exec: Exec, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match exec {
        Exec::Sequential => (0..n).map(f).collect(),
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
    }
}

/// Splits `0..n` into contiguous chunks of at most `chunk` items and maps `f`
/// over them. Results come back in chunk order.
pub fn map_chunks<T, F>(exec: Exec, n: usize, chunk: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(Range<usize>) -> T + Sync + Send,
{
    let chunk = chunk.max(1);
    let count = n.div_ceil(chunk);
    map_indexed(exec, count, |c| f(c * chunk..((c + 1) * chunk).min(n)))
}

/// Caps the global worker count. Returns false if the pool was already built
/// or the `parallel` feature is off.
pub fn set_threads(threads: usize) -> bool {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build_global()
            .is_ok()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunks_cover_range_in_order() {
        let got = map_chunks(Exec::default(), 10, 3, |r| (r.start, r.end));
        assert_eq!(got, vec![(0, 3), (3, 6), (6, 9), (9, 10)]);
        assert!(map_chunks(Exec::Sequential, 0, 4, |r| r.len()).is_empty());
    }

    #[test]
    fn strategies_agree() {
        let a = map_indexed(Exec::Sequential, 100, |i| (i as f64).sqrt());
        let b = map_indexed(Exec::default(), 100, |i| (i as f64).sqrt());
        assert_eq!(a, b);
    }
}
