//! Replica fan-out.
//!
//! Replicas share nothing but read-only configuration and draw from their own
//! noise streams, so results are independent of how they are scheduled. Both
//! maps return results ordered by replica index.

/// Runs `f(r)` for `r in 0..count` on the calling thread.
pub fn map_sequential<T, F>(count: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..count).map(f).collect()
}

/// Runs `f(r)` for `r in 0..count` on the rayon pool.
#[cfg(feature = "parallel")]
pub fn map_parallel<T, F>(count: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..count).into_par_iter().map(f).collect()
}

/// Default fan-out: parallel when the `parallel` feature is enabled.
pub fn map_replicas<T, F>(count: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        map_parallel(count, f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_sequential(count, f)
    }
}
