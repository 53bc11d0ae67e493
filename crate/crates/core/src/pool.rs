//! Order-preserving parallel map over a fixed-size worker pool.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Maps `f` over `items` on `workers` threads (`0` = all cores). Results are
/// returned in input order, so the worker count never changes the output.
pub fn par_map<T, R, F>(items: &[T], workers: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync + Send,
{
    if workers == 1 {
        return items.iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?;
    pool.install(|| items.par_iter().map(f).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_independent_of_workers() {
        let xs: Vec<u64> = (0..100).collect();
        let a = par_map(&xs, 1, |x| Ok(x * x)).unwrap();
        let b = par_map(&xs, 4, |x| Ok(x * x)).unwrap();
        assert_eq!(a, b);
        assert!(par_map(&xs, 3, |&x| if x == 50 { Err(Error::Data("x".into())) } else { Ok(x) }).is_err());
    }
}
