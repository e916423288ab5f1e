//! Library side of the `rlvio` command: configuration, manifests, the EKF
//! baseline, training and evaluation drivers, and the command bodies.

pub mod commands;
pub mod config;
pub mod ekf;
pub mod experiments;
pub mod manifest;

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("missing checkpoint {}: {reason}", path.display())]
    MissingCheckpoint { path: PathBuf, reason: String },

    #[error(transparent)]
    Core(#[from] rlvio::Error),
}

impl CliError {
    /// 2 config, 3 data, 4 numerical abort.
    pub fn exit_code(&self) -> i32 {
        use rlvio::Error as E;
        match self {
            CliError::Config(_) | CliError::MissingCheckpoint { .. } => 2,
            CliError::Core(E::NumericalAbort(_)) => 4,
            CliError::Core(E::Domain(_)) => 2,
            CliError::Core(_) => 3,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
