//! Data-parallel map over independent items with a sequential fallback.
//!
//! Every caller combines the returned values in index order, so results are
//! bit-identical regardless of thread count or whether the `parallel` feature
//! is enabled.

#[cfg(feature = "parallel")]
pub(crate) fn map_indexed<I, T, F>(items: &[I], f: F) -> Vec<T>
where
    I: Sync,
    T: Send,
    F: Fn(usize, &I) -> T + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().enumerate().map(|(i, item)| f(i, item)).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn map_indexed<I, T, F>(items: &[I], f: F) -> Vec<T>
where
    F: Fn(usize, &I) -> T,
{
    items.iter().enumerate().map(|(i, item)| f(i, item)).collect()
}
