//! Configuration files, cohort handling and table output for the command-line tool.

pub mod config;
pub mod report;

use std::path::{Path, PathBuf};

use crate::cohort::{calibrate_generator, default_targets, generate_cohort, Cohort};
use crate::error::Result;
use crate::harness::{run_grid, GridOptions, ScenarioSummary};

pub use config::{parse_config, parse_config_str, SimConfig};
pub use report::{emit_summaries, render, EmitFormat};

pub const DEFAULT_COHORT_SIZE: usize = 100_000;
pub const DEFAULT_COHORT_SEED: u64 = 20_240_101;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub config_path: PathBuf,
    pub base_seed: u64,
    pub reps: usize,
    pub threads: usize,
    /// Standard output when absent.
    pub output_path: Option<PathBuf>,
    pub cohort_path: Option<PathBuf>,
    pub emit_format: EmitFormat,
}

/// Calibrates the schedule generator to the default targets and draws a cohort.
pub fn generate_default_cohort(size: usize, seed: u64) -> Result<Cohort> {
    let report = calibrate_generator(&default_targets(), seed)?;
    generate_cohort(&report.params, size, seed)
}

/// Loads the cohort at `path`, or generates the default cohort and caches it
/// there when the file does not exist yet.
pub fn load_or_generate_cohort(path: Option<&Path>) -> Result<Cohort> {
    match path {
        Some(p) if p.exists() => Cohort::load(p),
        Some(p) => {
            let cohort = generate_default_cohort(DEFAULT_COHORT_SIZE, DEFAULT_COHORT_SEED)?;
            cohort.save(p)?;
            Ok(cohort)
        }
        None => generate_default_cohort(DEFAULT_COHORT_SIZE, DEFAULT_COHORT_SEED),
    }
}

pub fn simulate(run: &RunConfig) -> Result<Vec<ScenarioSummary>> {
    let config = parse_config(&run.config_path)?;
    let cohort = load_or_generate_cohort(run.cohort_path.as_deref())?;
    let opts = GridOptions {
        reps: run.reps,
        threads: run.threads,
        base_seed: run.base_seed,
        oracle: config.oracle,
    };
    run_grid(&config.scenarios, &config.methods, &cohort, &opts)
}
