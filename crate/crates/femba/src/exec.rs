//! Scoped-thread executor for the integer engine.

use std::ops::Range;

use femba_core::engine::{partition, Executor};

pub const THREADS_ENV: &str = "FEMBA_THREADS";

/// Splits work into `threads` contiguous parts run on scoped threads.
/// Results come back in part order, so output never depends on scheduling.
#[derive(Debug, Clone, Copy)]
pub struct ThreadExecutor {
    pub threads: usize,
}

impl ThreadExecutor {
    pub fn new(threads: usize) -> Self {
        Self { threads: threads.max(1) }
    }

    /// `FEMBA_THREADS` if set and positive, else the available parallelism.
    pub fn from_env() -> Self {
        let n = std::env::var(THREADS_ENV)
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .filter(|&n| n > 0)
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
        Self::new(n)
    }
}

impl Executor for ThreadExecutor {
    fn map_ranges<T: Send>(&self, n: usize, f: &(dyn Fn(Range<usize>) -> T + Sync)) -> Vec<T> {
        let parts = partition(n, self.threads);
        if parts.len() <= 1 {
            return parts.into_iter().map(f).collect();
        }
        std::thread::scope(|s| {
            let handles: Vec<_> = parts.into_iter().map(|r| s.spawn(move || f(r))).collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn results_are_in_part_order() {
        let e = ThreadExecutor::new(4);
        let v = e.map_ranges(10, &|r| r.start);
        assert_eq!(v, [0, 3, 6, 8]);
        let sums: usize = e.map_ranges(1000, &|r| r.sum::<usize>()).iter().sum();
        assert_eq!(sums, 999 * 1000 / 2);
        assert!(ThreadExecutor::new(3).map_ranges(0, &|r| r.len()).len() <= 1);
    }
}
