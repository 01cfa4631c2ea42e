//! Worker-count setting shared by decoding and gradient checks.

use std::sync::atomic::{AtomicUsize, Ordering};

static JOBS: AtomicUsize = AtomicUsize::new(0);

/// Caps worker threads; `0` restores the default (all cores).
pub fn set_jobs(n: usize) {
    JOBS.store(n, Ordering::Relaxed);
}

pub fn jobs() -> usize {
    match JOBS.load(Ordering::Relaxed) {
        0 => std::thread::available_parallelism().map_or(1, |w| w.get()),
        n => n,
    }
}

/// Maps `f` over `items` on up to [`jobs`] threads, keeping input order.
pub fn map<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> U + Sync) -> Vec<U> {
    let workers = jobs().min(items.len()).max(1);
    if workers == 1 {
        return items.iter().map(f).collect();
    }
    let f = &f;
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| scope.spawn(move || items.iter().enumerate().filter(|(i, _)| i % workers == w).map(|(i, x)| (i, f(x))).collect::<Vec<_>>()))
            .collect();
        let mut out: Vec<(usize, U)> = handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect();
        out.sort_by_key(|(i, _)| *i);
        out.into_iter().map(|(_, u)| u).collect()
    })
}
