//! Order-preserving parallel map with an explicit worker count.

use rayon::prelude::*;

/// Maps `f` over `items` using up to `workers` threads. The output order
/// matches the input order; with `workers <= 1` the map runs inline.
pub fn map<T, R, F>(workers: usize, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    if workers <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    if rayon::current_thread_index().is_some() {
        return items.par_iter().map(f).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(pool) => pool.install(|| items.par_iter().map(&f).collect()),
        Err(e) => {
            log::warn!("could not start {workers} worker threads ({e}); running sequentially");
            items.iter().map(f).collect()
        }
    }
}
