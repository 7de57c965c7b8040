use rayon::prelude::*;

use crate::error::Result;

/// Maps `f` over `items` on up to `jobs` threads (0 = all cores), keeping
/// input order. Runs inline when `jobs == 1` or `serial` is set.
pub(crate) fn try_map<T, U, F>(jobs: usize, serial: bool, items: &[T], f: F) -> Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> Result<U> + Sync + Send,
{
    if jobs == 1 || serial || items.len() < 2 {
        return items.iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| crate::error::Error::invalid(format!("thread pool: {e}")))?;
    pool.install(|| items.par_iter().map(f).collect())
}
