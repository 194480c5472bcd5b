//! Data-parallel execution with a sequential fallback.
//!
//! Randomness is always drawn on the calling thread before work is handed
//! to [`Execution::map`], so both modes produce identical results.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// How per-item work is scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    /// Falls back to sequential when the `parallel` feature is disabled.
    Parallel,
}

impl Default for Execution {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

impl Execution {
    /// Order-preserving map over a slice.
    pub fn map<T, U, F>(self, items: &[T], f: F) -> Vec<U>
    where
        T: Sync,
        U: Send,
        F: Fn(usize, &T) -> U + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel => items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect(),
            _ => items.iter().enumerate().map(|(i, t)| f(i, t)).collect(),
        }
    }

    /// Order-preserving map over `0..len`.
    pub fn map_range<U, F>(self, len: usize, f: F) -> Vec<U>
    where
        U: Send,
        F: Fn(usize) -> U + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel => (0..len).into_par_iter().map(f).collect(),
            _ => (0..len).map(f).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree() {
        let items: Vec<u64> = (0..500).collect();
        let seq = Execution::Sequential.map(&items, |i, v| v * v + i as u64);
        let par = Execution::Parallel.map(&items, |i, v| v * v + i as u64);
        assert_eq!(seq, par);
        assert_eq!(Execution::Sequential.map_range(7, |i| i * 2), Execution::Parallel.map_range(7, |i| i * 2));
    }
}
