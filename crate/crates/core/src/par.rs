use rayon::prelude::*;

/// Maps `f` over `items` in parallel and returns results in input order, so
/// the output never depends on scheduling.
pub(crate) fn ordered_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect()
}
