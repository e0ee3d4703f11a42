//! Experiment front end: configuration, replica orchestration, rate fits,
//! theory overlays and CSV/JSON/SVG output.

mod commands;
pub mod config;
pub mod fit;
pub mod plot;
pub mod selftest;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use commands::{
    averaged_chain_inputs, bound_inputs, cmd_bounds, cmd_consensus, cmd_convergence, cmd_spectra, BoundValue,
    BoundsReport, ConsensusReport, ConvergenceReport, FinePassage, PlateauSummary, RecursionSummary, SpectraReport,
};
pub use config::{ExperimentConfig, Instance, Overrides};
pub use fit::{fit_decay_ratio, fit_rate, fit_rate_window, RateFit};
pub use selftest::{cmd_selftest, Faults, SelfTestReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_VACUOUS: i32 = 4;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("replica {replica} diverged at iteration {iteration}")]
    Diverged { replica: usize, iteration: u64 },
    #[error("rate fit failed: {0}")]
    Fit(String),
    #[error("cannot write {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("self-test failed: {0}")]
    SelfTest(String),
    #[error("{0}")]
    Other(String),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => EXIT_CONFIG,
            HarnessError::Diverged { .. } => EXIT_DIVERGED,
            _ => EXIT_OTHER,
        }
    }
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<(), HarnessError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| HarnessError::Io { path: parent.to_path_buf(), message: e.to_string() })?;
    }
    std::fs::write(path, contents).map_err(|e| HarnessError::Io { path: path.to_path_buf(), message: e.to_string() })
}

pub(crate) fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| HarnessError::Other(e.to_string()))?;
    write_file(path, &(text + "\n"))
}
