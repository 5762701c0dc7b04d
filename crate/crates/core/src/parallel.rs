//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) [`Execution::Parallel`] fans work
//! out over the rayon pool; without it every call runs sequentially.
//! Results are always returned in input order, so parallel and sequential
//! runs produce identical outputs.

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    #[default]
    Sequential,
    Parallel,
}

impl Execution {
    /// `Parallel` when more than one job is requested and the feature is on.
    pub fn from_jobs(jobs: usize) -> Self {
        if jobs > 1 && cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

pub fn map<I, O, F>(exec: Execution, items: &[I], f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> O + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            items.par_iter().map(f).collect()
        }
        _ => items.iter().map(f).collect(),
    }
}

pub fn try_map<I, O, F>(exec: Execution, items: &[I], f: F) -> Result<Vec<O>>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> Result<O> + Sync + Send,
{
    map(exec, items, f).into_iter().collect()
}

/// Runs `f` with a pool of `jobs` worker threads when parallelism is
/// available, otherwise directly.
pub fn with_jobs<R: Send>(jobs: usize, f: impl FnOnce(Execution) -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    {
        if jobs > 1 {
            if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
                return pool.install(|| f(Execution::Parallel));
            }
        }
    }
    let _ = jobs;
    f(Execution::Sequential)
}
