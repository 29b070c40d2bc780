//! Reproducible workflows over the physics and network crates: dataset
//! generation, training, evaluation and single-shot reconstruction, plus
//! the on-disk formats they share.
//!
//! - [`config`]: the JSON run configuration and its schema
//! - [`dataset`]: simulated training pairs and the manifest
//! - [`checkpoint`]: network parameters with optimizer state
//! - [`train`], [`evaluate`], [`recon`]: the three workflows

pub mod checkpoint;
pub mod config;
pub mod dataset;
mod error;
pub mod evaluate;
pub mod recon;
pub mod train;

pub use config::RunConfig;
pub use error::{PipelineError, Result};

/// Environment variable overriding the worker thread count.
pub const THREADS_ENV: &str = "PAT_NUM_THREADS";

/// Sizes the global thread pool from [`THREADS_ENV`] when it is set.
pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| PipelineError::Usage(format!("{THREADS_ENV} must be a positive integer, got '{v}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| PipelineError::Usage(format!("cannot size the thread pool: {e}")))
}
