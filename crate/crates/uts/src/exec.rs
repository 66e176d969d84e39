use std::num::NonZeroUsize;
use std::thread;

use uts_core::train::Executor;

/// Splits jobs into contiguous ranges, one per worker thread. Results come
/// back in job order whatever the thread count.
#[derive(Debug, Clone, Copy)]
pub struct Threaded {
    threads: usize,
}

impl Threaded {
    pub fn new(threads: usize) -> Self {
        Threaded {
            threads: threads.max(1),
        }
    }

    /// One worker per available core.
    pub fn machine() -> Self {
        Self::new(default_threads())
    }

    pub fn threads(&self) -> usize {
        self.threads
    }
}

pub fn default_threads() -> usize {
    thread::available_parallelism().map_or(1, NonZeroUsize::get)
}

impl Executor for Threaded {
    fn map<R, F>(&self, jobs: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync,
    {
        let workers = self.threads.min(jobs);
        if workers <= 1 {
            return (0..jobs).map(f).collect();
        }
        let per = jobs.div_ceil(workers);
        let f = &f;
        thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let range = w * per..((w + 1) * per).min(jobs);
                    s.spawn(move || range.map(f).collect::<Vec<R>>())
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("worker thread panicked"))
                .collect()
        })
    }
}
