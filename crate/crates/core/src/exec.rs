//! Worker fan-out used by graph construction, batch gradients and evaluation.
//!
//! Work is split into `workers` contiguous chunks and results are returned in
//! input order, so a fixed worker count always produces the same output. With
//! one worker (or without the `parallel` feature) everything runs inline on
//! the calling thread.

#[cfg(feature = "parallel")]
use std::sync::Arc;

use crate::error::{Error, Result};

#[derive(Clone)]
pub struct Executor {
    workers: usize,
    #[cfg(feature = "parallel")]
    pool: Option<Arc<rayon::ThreadPool>>,
}

impl std::fmt::Debug for Executor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Executor")
            .field("workers", &self.workers)
            .finish()
    }
}

impl Default for Executor {
    fn default() -> Self {
        Executor::sequential()
    }
}

impl Executor {
    pub fn sequential() -> Self {
        Executor {
            workers: 1,
            #[cfg(feature = "parallel")]
            pool: None,
        }
    }

    /// Builds an executor with `workers` threads. Without the `parallel`
    /// feature the request is accepted but work still runs inline.
    pub fn new(workers: usize) -> Result<Self> {
        if workers == 0 {
            return Err(Error::Config("worker count must be at least 1".into()));
        }
        if workers == 1 {
            return Ok(Executor::sequential());
        }
        #[cfg(feature = "parallel")]
        {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            Ok(Executor {
                workers,
                pool: Some(Arc::new(pool)),
            })
        }
        #[cfg(not(feature = "parallel"))]
        {
            Ok(Executor { workers })
        }
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    /// Ordered map over `items`.
    pub fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(usize, &T) -> R + Sync,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            use rayon::prelude::*;
            return pool.install(|| items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect());
        }
        items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
    }

    /// Splits `items` into at most `workers` contiguous chunks, folds each
    /// chunk into a fresh accumulator and returns the accumulators in chunk
    /// order. Callers merge them left to right.
    pub fn fold_chunks<T, A, I, F>(&self, items: &[T], init: I, fold: F) -> Vec<A>
    where
        T: Sync,
        A: Send,
        I: Fn() -> A + Sync,
        F: Fn(&mut A, usize, &T) + Sync,
    {
        let chunk_len = items.len().div_ceil(self.workers.max(1)).max(1);
        let run = |(chunk_idx, chunk): (usize, &[T])| {
            let mut acc = init();
            for (offset, item) in chunk.iter().enumerate() {
                fold(&mut acc, chunk_idx * chunk_len + offset, item);
            }
            acc
        };
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            use rayon::prelude::*;
            return pool.install(|| items.par_chunks(chunk_len).enumerate().map(run).collect());
        }
        items.chunks(chunk_len).enumerate().map(run).collect()
    }
}
