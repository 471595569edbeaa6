//! Config-driven experiment runs and their artifacts.

pub mod build;
pub mod config;
pub mod output;
pub mod run;

use thiserror::Error;

use crate::data::DataError;
use crate::eval::EvalError;
use crate::federation::FederationError;
use crate::model::ModelError;
use crate::transport::TransportError;

pub use config::{ConfigError, ExperimentConfig};
pub use run::{baseline, join, serve, serve_on, simulate, validate, RunOptions, RunSummary, ValidationSummary};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Federation(#[from] FederationError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl RunError {
    /// 1 for config and usage errors, 3 for a config-hash mismatch with a
    /// peer, 2 for anything that went wrong while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Usage(_) | RunError::Data(_) => 1,
            RunError::Transport(TransportError::ConfigMismatch(_)) => 3,
            _ => 2,
        }
    }
}
