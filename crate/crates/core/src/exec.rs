use rayon::prelude::*;

use crate::error::Result;

/// Maps `f` over `items` keeping input order, with at most `workers` calls in
/// flight. The first error in input order wins.
pub(crate) fn map_ordered<T, R, F>(workers: usize, items: &[T], f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync + Send,
{
    if workers <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .expect("thread pool");
    pool.install(|| items.par_iter().map(f).collect::<Vec<_>>())
        .into_iter()
        .collect()
}
