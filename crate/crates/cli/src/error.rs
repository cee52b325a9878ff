use std::path::Path;

use sapflux_core::changepoint::ChangepointError;
use sapflux_core::io::IoError;
use sapflux_core::model::ModelError;
use sapflux_core::rolling::RollingError;
use sapflux_core::spa::SpaError;
use sapflux_core::synth::SynthError;
use sapflux_core::wateruse::WaterUseError;
use thiserror::Error;

use crate::config::ConfigError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {message}")]
    File { path: String, message: String },
    #[error("{path}: {source}")]
    Csv { path: String, source: IoError },
    #[error("input {path} changed: recorded sha256 {expected}, found {found}")]
    DigestMismatch { path: String, expected: String, found: String },
    #[error("{0}")]
    Validation(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn file(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::File { path: path.display().to_string(), message: e.to_string() }
    }

    pub fn csv(path: &Path, source: IoError) -> Self {
        CliError::Csv { path: path.display().to_string(), source }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Numeric(_) => 2,
            _ => 1,
        }
    }
}

impl From<RollingError> for CliError {
    fn from(e: RollingError) -> Self {
        match e {
            RollingError::Model(_) | RollingError::Ensemble(_) | RollingError::NoMembers(_) | RollingError::NoInitialCondition(_) => {
                CliError::Numeric(e.to_string())
            }
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::BadSpec(_) | ModelError::VersionMismatch { .. } | ModelError::Json(_) | ModelError::MissingChannel(_) => {
                CliError::Validation(e.to_string())
            }
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<SpaError> for CliError {
    fn from(e: SpaError) -> Self {
        match e {
            SpaError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<ChangepointError> for CliError {
    fn from(e: ChangepointError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<WaterUseError> for CliError {
    fn from(e: WaterUseError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<sapflux_core::series::SeriesError> for CliError {
    fn from(e: sapflux_core::series::SeriesError) -> Self {
        CliError::Validation(e.to_string())
    }
}
