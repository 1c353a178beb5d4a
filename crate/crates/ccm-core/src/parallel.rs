//! Data-parallel helpers with a sequential fallback.
//!
//! Per-item work throughout the crate is independently seeded, and callers
//! reduce results in index order, so the parallel and sequential paths are
//! bitwise interchangeable. With the `parallel` feature disabled every call
//! degrades to the sequential loop.

/// How batch-level loops execute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Parallelism {
    /// Plain sequential loop; the reproducibility reference.
    Sequential,
    /// Rayon work-stealing over the global pool (sequential when the
    /// `parallel` feature is off).
    #[default]
    Rayon,
}

impl Parallelism {
    /// Conventional mapping from a `--threads` flag: 1 forces the sequential
    /// path, anything else uses the pool.
    pub fn from_threads(threads: usize) -> Self {
        if threads == 1 {
            Parallelism::Sequential
        } else {
            Parallelism::Rayon
        }
    }
}

/// Map `f` over `0..n`, returning results in index order.
pub fn map_range<U, F>(n: usize, par: Parallelism, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Send + Sync,
{
    match par {
        Parallelism::Sequential => (0..n).map(f).collect(),
        Parallelism::Rayon => {
            #[cfg(feature = "parallel")]
            {
                use rayon::prelude::*;
                (0..n).into_par_iter().map(f).collect()
            }
            #[cfg(not(feature = "parallel"))]
            {
                (0..n).map(f).collect()
            }
        }
    }
}

/// Map `f` over a slice with indices, returning results in slice order.
pub fn map_indexed<T, U, F>(items: &[T], par: Parallelism, f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(usize, &T) -> U + Send + Sync,
{
    map_range(items.len(), par, |i| f(i, &items[i]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_matches_sequential_order() {
        let items: Vec<u64> = (0..257).collect();
        let seq = map_indexed(&items, Parallelism::Sequential, |i, &v| v * 3 + i as u64);
        let par = map_indexed(&items, Parallelism::Rayon, |i, &v| v * 3 + i as u64);
        assert_eq!(seq, par);
    }
}
