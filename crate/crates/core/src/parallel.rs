//! Worker pool sized by the `ROCNET_THREADS` environment variable.
//!
//! `ROCNET_THREADS=0` (or 1) runs everything on the calling thread. Unset means
//! one worker per available core.

use std::sync::OnceLock;

use rayon::prelude::*;

static POOL: OnceLock<Option<rayon::ThreadPool>> = OnceLock::new();

fn pool() -> &'static Option<rayon::ThreadPool> {
    POOL.get_or_init(|| {
        let requested = match std::env::var("ROCNET_THREADS") {
            Ok(v) => v.trim().parse::<usize>().unwrap_or(0),
            Err(_) => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        };
        if requested <= 1 {
            return None;
        }
        rayon::ThreadPoolBuilder::new().num_threads(requested).build().ok()
    })
}

/// Number of workers available to internal parallel sections (1 when sequential).
pub fn threads() -> usize {
    pool().as_ref().map_or(1, |p| p.current_num_threads())
}

pub(crate) fn for_each<I: Sync, F: Fn(&I) + Sync + Send>(items: &[I], f: F) {
    match pool() {
        Some(p) => p.install(|| items.par_iter().for_each(&f)),
        None => items.iter().for_each(f),
    }
}
