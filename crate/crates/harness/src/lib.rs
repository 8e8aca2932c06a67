//! Experiment harness: flat configs, per-subcommand runners, the acceptance
//! suite and atomic output directories.

pub mod acceptance;
pub mod config;
pub mod experiments;
pub mod report;

use anyhow::Result;

use config::ExperimentConfig;
use report::Report;

/// Runs the experiment on a pool of `cfg.shards` workers. Outputs do not
/// depend on the shard count.
pub fn run(cfg: &ExperimentConfig) -> Result<Report> {
    #[cfg(feature = "parallel")]
    {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(cfg.shards).build()?;
        pool.install(|| experiments::run(cfg))
    }
    #[cfg(not(feature = "parallel"))]
    experiments::run(cfg)
}
