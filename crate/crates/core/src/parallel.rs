//! Order-preserving data-parallel map.
//!
//! With the `parallel` feature the work is spread over the rayon pool that is
//! current on the calling thread; without it (or with a single worker) the
//! map runs sequentially. Results always come back in input order, so every
//! reduction downstream sums in the same sequence and stays bit-identical
//! between the two builds.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if items.len() > 1 && rayon::current_num_threads() > 1 {
            return items.par_iter().map(f).collect();
        }
    }
    map_seq(items, f)
}

pub fn map_seq<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}

/// Runs `f` on every item with at most `jobs` workers.
pub fn map_with_jobs<T, R, F>(items: &[T], jobs: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if jobs > 1 && items.len() > 1 {
            if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
                return pool.install(|| items.par_iter().map(f).collect());
            }
        }
    }
    let _ = jobs;
    map_seq(items, f)
}
