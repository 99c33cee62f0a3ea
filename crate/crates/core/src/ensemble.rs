//! Replica-parallel execution with deterministic, replica-ordered results.

use rayon::prelude::*;

/// Evaluates `f(r)` for `r in 0..replicas`, in parallel, and returns the
/// results ordered by replica index.
///
/// With `workers = Some(k)` the work runs on a dedicated pool of `k`
/// threads; otherwise on the global rayon pool. The output never depends on
/// the worker count because every replica owns its random stream.
pub fn map_replicas<T, F>(replicas: u64, workers: Option<usize>, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync + Send,
{
    let run = || (0..replicas).into_par_iter().map(&f).collect::<Vec<T>>();
    match workers {
        Some(k) if k > 0 => match rayon::ThreadPoolBuilder::new().num_threads(k).build() {
            Ok(pool) => pool.install(run),
            Err(_) => run(),
        },
        _ => run(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_replica_order() {
        let a = map_replicas(1000, Some(1), |r| r * r);
        let b = map_replicas(1000, Some(4), |r| r * r);
        assert_eq!(a, b);
        assert_eq!(a[999], 999 * 999);
    }
}
