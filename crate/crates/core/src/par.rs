//! Execution strategy for per-image work.
//!
//! Every parallel loop in the crate goes through [`map`] / [`try_map`], which
//! preserve input order. Reductions happen afterwards in a fixed order, so the
//! results are bit-identical whatever the worker count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// How data-parallel loops are executed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Execution {
    /// Parallel when the `parallel` feature is compiled in, else sequential.
    #[default]
    Auto,
    Sequential,
    /// Falls back to sequential without the `parallel` feature.
    Parallel,
}

impl Execution {
    pub fn is_parallel(self) -> bool {
        match self {
            Execution::Sequential => false,
            Execution::Auto | Execution::Parallel => cfg!(feature = "parallel"),
        }
    }
}

pub(crate) fn map<T, R, F>(exec: Execution, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        return items.par_iter().map(f).collect();
    }
    let _ = exec;
    items.iter().map(f).collect()
}

pub(crate) fn try_map<T, R, E, F>(exec: Execution, items: &[T], f: F) -> Result<Vec<R>, E>
where
    T: Sync,
    R: Send,
    E: Send,
    F: Fn(&T) -> Result<R, E> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        return items.par_iter().map(f).collect();
    }
    let _ = exec;
    items.iter().map(f).collect()
}
