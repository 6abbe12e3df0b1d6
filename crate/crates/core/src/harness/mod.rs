//! Experiment configuration, runners, metrics files and the self-test suite.

pub mod check;
pub mod config;
pub mod metrics;
pub mod run;

pub use config::{load_config, parse_config, ExperimentConfig, Mode};
pub use metrics::{emit_plotdata, seam_discrepancy, MetricsRow};
pub use run::{run, run_file, RunSummary};

use crate::error::{CsdError, Result};

/// Process exit status for an error: 2 for configuration problems, 3 for a
/// numeric abort, 1 otherwise.
pub fn exit_code(err: &CsdError) -> i32 {
    match err {
        CsdError::Config { .. } | CsdError::Json(_) => 2,
        CsdError::NumericAbort { .. } => 3,
        _ => 1,
    }
}

/// Worker count from `CSD_THREADS`; `None` when unset.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var("CSD_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CsdError::config("CSD_THREADS", format!("`{v}` is not a positive integer"))),
        },
    }
}

/// Run `f` on a pool of `threads` workers, or the global pool when `None`.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CsdError::config("CSD_THREADS", e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}
