//! Training, evaluation, benchmarking and sweeps.

pub mod bench;
pub mod config;
pub mod eval;
pub mod metrics;
pub mod sweep;
pub mod train;

pub use bench::{benchmark, routing_benchmark, BenchReport, RoutingBench};
pub use config::TrainConfig;
pub use eval::{evaluate, EvalReport};
pub use metrics::{export_metrics, read_metrics_csv, MetricsFormat, MetricsRecord};
pub use sweep::{sweep, SweepKind, SweepRow};
pub use train::{train, train_from, EpochStats, TrainOutcome, Trainer};

use crate::error::{Error, Result};

/// Run `f` on a single worker thread when `deterministic` is set, otherwise
/// on the global pool.
pub fn with_threads<R: Send>(deterministic: bool, f: impl FnOnce() -> R + Send) -> Result<R> {
    if !deterministic {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::Config(format!("cannot build single-thread pool: {e}")))?;
    Ok(pool.install(f))
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
