//! Experiment layer over [`glearn_core`]: file formats, run configuration,
//! and the five experiment drivers behind the `glearn` binary.
//!
//! The binary is a thin shell; everything it does lives here so integration
//! and acceptance tests can call the same code paths directly:
//!
//! - [`config`] — the flat TOML experiment file plus `--set key=value`
//!   overrides, resolved into per-seed [`glearn_core::engine::RunConfig`]s.
//! - [`io`] — dataset directories (features/labels CSV, optional edge list,
//!   optional fixed split files) with line-numbered errors, and the inverse
//!   writer used for round-trip checks.
//! - [`experiments`] — train/eval/robustness/convergence/timing drivers
//!   returning plain result structs.
//! - [`report`] — JSONL records, human-readable summaries, and CSV curves
//!   derived from those structs.

pub mod config;
pub mod experiments;
pub mod io;
pub mod report;

/// Failures of the experiment layer, split by exit code.
///
/// `Usage` (exit 1) covers bad flags, unknown config keys, and out-of-range
/// hyperparameters; `Data` (exit 2) covers missing or malformed dataset
/// files and impossible experiment requests; `Numerical` (exit 3) covers
/// runs that aborted on non-finite values.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CliError::Data(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        CliError::Numerical(msg.into())
    }

    /// Process exit code for this failure class.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<glearn_core::Error> for CliError {
    fn from(e: glearn_core::Error) -> Self {
        match e {
            glearn_core::Error::InvalidConfig(_) => CliError::Usage(e.to_string()),
            glearn_core::Error::Contract(_) => CliError::Data(e.to_string()),
            glearn_core::Error::Numerical(_) => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
