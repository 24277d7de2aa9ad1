//! Command implementations behind the `pilotforge` binary.

pub mod commands;
pub mod config;
pub mod report;

pub use commands::{
    artifact_paths, cmd_eval, cmd_gen_data, cmd_select, cmd_train, eval_frame, evaluate_mmse,
    evaluate_pipeline, load_pattern, load_pipeline, load_selector_decoder, load_split,
    uniform_method, Layout, PatternSource, Selection, SnrWindow, METHOD_CAE, METHOD_LS_DECODER,
    METHOD_MMSE,
};
pub use config::{ExperimentConfig, SCHEMA_VERSION};
pub use report::{
    cmd_report, figure_files, read_csv, rows_from_csv, rows_to_csv, write_csv, ReportRow,
    CSV_HEADER,
};

use crate::error::{Error, Result};

pub const THREADS_ENV: &str = "PILOTFORGE_THREADS";

/// Sizes the global worker pool from `PILOTFORGE_THREADS` when it is set.
pub fn init_threads() -> Result<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| {
            Error::Config(format!(
                "{THREADS_ENV} must be a positive integer, got `{value}`"
            ))
        })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot size the worker pool: {e}")))
}
