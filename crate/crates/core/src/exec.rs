//! Injection point for data parallelism. The core only ships a sequential
//! executor; a thread-pool implementation lives in the std crate.

use alloc::vec::Vec;

/// Maps `f` over `0..count`, returning results in index order.
///
/// Implementations must not change results: every solver and simulator
/// arranges its work so that each index is computed independently.
pub trait Executor: Sync {
    fn map<T, F>(&self, count: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl Executor for Sequential {
    fn map<T, F>(&self, count: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        (0..count).map(f).collect()
    }
}
