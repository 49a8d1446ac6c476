//! Training, evaluation, sweeps and checkpoint files.

use std::sync::OnceLock;

use rayon::{ThreadPool, ThreadPoolBuilder};

use crate::error::{arg_err, Result};

pub mod checkpoint;
pub mod eval;
pub mod optim;
pub mod sweep;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use eval::{baseline_select, evaluate, evaluate_model, BaselineKind, EvalOptions, EvalReport};
pub use optim::{AdamW, AdamWConfig};
pub use sweep::{run_sweep, PointOutcome, SweepConfig, SweepRow};
pub use train::{train, train_on, MetricsRecord, TrainConfig, TrainOutcome};

/// Environment variable capping the worker threads (default: all cores).
pub const THREADS_ENV: &str = "STTS_THREADS";

/// Derives an independent seed from `(seed, index)` (splitmix64 finalizer).
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Shared worker pool sized by [`THREADS_ENV`]. Results never depend on
/// its size.
pub fn worker_pool() -> Result<&'static ThreadPool> {
    static POOL: OnceLock<std::result::Result<ThreadPool, String>> = OnceLock::new();
    POOL.get_or_init(|| {
        let threads = match std::env::var(THREADS_ENV) {
            Ok(v) => v
                .parse::<usize>()
                .map_err(|_| format!("{THREADS_ENV}={v} is not a thread count"))?,
            Err(_) => 0,
        };
        ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| e.to_string())
    })
    .as_ref()
    .map_err(|e| arg_err!("{e}"))
}
