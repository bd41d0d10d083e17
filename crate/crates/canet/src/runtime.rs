//! Process-wide runtime knobs.

use std::sync::OnceLock;

static THREAD_POOL: OnceLock<()> = OnceLock::new();

/// Caps rayon's global pool at `CANET_THREADS` threads when the variable is
/// set. Runs once; later calls are no-ops. Kernels partition work so results
/// are identical for any thread count; the cap exists to bound CPU use.
pub fn init_thread_pool() {
    THREAD_POOL.get_or_init(|| {
        if let Ok(v) = std::env::var("CANET_THREADS") {
            if let Ok(n) = v.parse::<usize>() {
                if n >= 1 {
                    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
                }
            }
        }
    });
}
