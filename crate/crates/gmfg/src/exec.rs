//! Thread-pool executor for the core solvers.

use gmfg_core::Executor;
use rayon::prelude::*;
use rayon::ThreadPool;

/// Runs index maps on a rayon pool. Results come back in index order, so the
/// thread count never changes output.
#[derive(Debug, Default)]
pub struct Rayon {
    pool: Option<ThreadPool>,
}

impl Rayon {
    /// `None` uses the global pool.
    pub fn new(threads: Option<usize>) -> Result<Self, rayon::ThreadPoolBuildError> {
        let pool = match threads {
            Some(n) => Some(rayon::ThreadPoolBuilder::new().num_threads(n).build()?),
            None => None,
        };
        Ok(Rayon { pool })
    }

    pub fn threads(&self) -> usize {
        self.pool.as_ref().map_or_else(rayon::current_num_threads, ThreadPool::current_num_threads)
    }
}

impl Executor for Rayon {
    fn map<T, F>(&self, count: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        let run = || (0..count).into_par_iter().map(&f).collect();
        match &self.pool {
            Some(pool) => pool.install(run),
            None => run(),
        }
    }
}
