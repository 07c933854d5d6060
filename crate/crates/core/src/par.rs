//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) the hot loops run on rayon; without
//! it, or when [`Exec::Sequential`] is requested, they run in order. Results
//! are always assembled in index order so both paths are bit-identical.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Execution policy for the data-parallel loops.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }
}

/// `(0..len).map(f).collect()` under the given policy.
pub fn map_range<T, F>(exec: Exec, len: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        return (0..len).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..len).map(f).collect()
}

/// Minimum of `f` over `0..len` under a total order. Ties are resolved by `cmp`,
/// so the result does not depend on the reduction tree.
pub fn min_by_range<T, F, C>(exec: Exec, len: usize, f: F, cmp: C) -> Option<T>
where
    T: Send,
    F: Fn(usize) -> Option<T> + Sync + Send,
    C: Fn(&T, &T) -> std::cmp::Ordering + Sync + Send,
{
    let pick = |a: Option<T>, b: Option<T>| match (a, b) {
        (None, x) | (x, None) => x,
        (Some(a), Some(b)) => {
            if cmp(&b, &a) == std::cmp::Ordering::Less {
                Some(b)
            } else {
                Some(a)
            }
        }
    };
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        return (0..len).into_par_iter().map(&f).reduce(|| None, pick);
    }
    let _ = exec;
    (0..len).map(f).fold(None, pick)
}
