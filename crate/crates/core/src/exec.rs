//! Data-parallel execution with a sequential fallback.
//!
//! Every batch-level loop in the crate is expressed as an order-preserving
//! map over independent items. With the `parallel` feature the map fans out on
//! rayon; without it, or with [`Exec::Sequential`], it runs in a plain loop.
//! Outputs always come back in input order, so any reduction the caller does
//! afterwards is schedule-independent.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    /// Rayon-backed; identical to `Sequential` when the `parallel` feature is off.
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

impl Exec {
    /// `workers <= 1` selects the sequential path.
    pub fn from_workers(workers: usize) -> Self {
        if workers <= 1 {
            Exec::Sequential
        } else {
            Exec::default()
        }
    }

    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }

    pub fn map<T, U, F>(self, items: &[T], f: F) -> Vec<U>
    where
        T: Sync,
        U: Send,
        F: Fn(&T) -> U + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self == Exec::Parallel {
            return items.par_iter().map(f).collect();
        }
        items.iter().map(f).collect()
    }

    pub fn map_range<U, F>(self, n: usize, f: F) -> Vec<U>
    where
        U: Send,
        F: Fn(usize) -> U + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self == Exec::Parallel {
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }
}

/// Runs `f` with an executor sized to `workers` threads.
///
/// With the `parallel` feature and `workers > 1`, `f` runs inside a dedicated
/// rayon pool of that size. `workers == 0` keeps rayon's global pool.
pub fn with_workers<R, F>(workers: usize, f: F) -> R
where
    R: Send,
    F: FnOnce(Exec) -> R + Send,
{
    #[cfg(feature = "parallel")]
    if workers > 1 {
        if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
            return pool.install(|| f(Exec::Parallel));
        }
    }
    if workers == 0 {
        f(Exec::default())
    } else {
        f(Exec::Sequential)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order_in_both_modes() {
        let items: Vec<u32> = (0..257).collect();
        let seq = Exec::Sequential.map(&items, |x| x * 3);
        let par = Exec::Parallel.map(&items, |x| x * 3);
        assert_eq!(seq, par);
        assert_eq!(seq[100], 300);
        assert_eq!(Exec::Parallel.map_range(5, |i| i * i), vec![0, 1, 4, 9, 16]);
    }

    #[test]
    fn workers_select_mode() {
        assert_eq!(Exec::from_workers(1), Exec::Sequential);
        assert_eq!(Exec::from_workers(0), Exec::Sequential);
        let got = with_workers(1, |e| e);
        assert_eq!(got, Exec::Sequential);
    }
}
