use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    ConfigParse(String),
    #[error("unknown subcommand `{0}`")]
    UnknownSubcommand(String),
    #[error("invalid configuration: {0}")]
    Validation(String),
    #[error("no artifacts found in {0}")]
    NoArtifactsFound(PathBuf),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Core(#[from] molrmog_core::Error),
}

impl CliError {
    /// 3 for numerical failures, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_numerical() => 3,
            _ => 2,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::ConfigParse(_) => "ConfigParseError",
            CliError::UnknownSubcommand(_) => "UnknownSubcommand",
            CliError::Validation(_) => "ValidationError",
            CliError::NoArtifactsFound(_) => "NoArtifactsFound",
            CliError::Io(_) | CliError::Csv(_) | CliError::Json(_) => "IoError",
            CliError::Core(e) => match e {
                molrmog_core::Error::DivergenceDetected { .. } => "DivergenceDetected",
                molrmog_core::Error::NaNDetected { .. } => "NaNDetected",
                _ => "ValidationError",
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
