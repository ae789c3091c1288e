//! Worker pool used by every data-parallel loop in the crate.
//!
//! With the `parallel` feature and more than one worker, tasks run on a
//! dedicated rayon pool. Otherwise they run in order on the calling thread.
//! Results are always returned in input order, so reductions done by the
//! caller are independent of scheduling.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

pub struct Executor {
    workers: usize,
    #[cfg(feature = "parallel")]
    pool: Option<rayon::ThreadPool>,
}

impl std::fmt::Debug for Executor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Executor")
            .field("workers", &self.workers)
            .finish()
    }
}

impl Executor {
    pub fn new(workers: usize) -> Self {
        let workers = workers.max(1);
        #[cfg(feature = "parallel")]
        {
            let pool = if workers > 1 {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(workers)
                    .build()
                    .ok()
            } else {
                None
            };
            Executor { workers, pool }
        }
        #[cfg(not(feature = "parallel"))]
        Executor { workers }
    }

    pub fn sequential() -> Self {
        Self::new(1)
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    /// Maps `f` over `items`, preserving order.
    pub fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            return pool.install(|| items.par_iter().map(&f).collect());
        }
        items.iter().map(f).collect()
    }

    /// Maps `f` over `0..n`, preserving order.
    pub fn map_range<R, F>(&self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            return pool.install(|| (0..n).into_par_iter().map(&f).collect());
        }
        (0..n).map(f).collect()
    }

    /// Applies `f` to every element in place.
    pub fn for_each_mut<T, F>(&self, items: &mut [T], f: F)
    where
        T: Send,
        F: Fn(&mut T) + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            pool.install(|| items.par_iter_mut().for_each(&f));
            return;
        }
        items.iter_mut().for_each(f);
    }
}

impl Default for Executor {
    fn default() -> Self {
        Self::sequential()
    }
}

/// Worker count from `FHDGM_WORKERS`, falling back to 1.
pub fn workers_from_env() -> usize {
    std::env::var("FHDGM_WORKERS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&w| w >= 1)
        .unwrap_or(1)
}
