use std::path::Path;

use crate::config::ConfigError;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Numeric(String),
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Other(_) => 1,
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Other(format!("{}: {e}", path.display()))
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
            CliError::Other(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.0)
    }
}

impl From<sca_core::Error> for CliError {
    fn from(e: sca_core::Error) -> Self {
        use sca_core::Error as E;
        let msg = e.to_string();
        match e {
            E::Data(_) | E::Format(_) => CliError::Data(msg),
            E::NonFinite(_) => CliError::Numeric(msg),
            E::InvalidArgument(_) => CliError::Config(msg),
            E::Shape { .. } | E::Graph(_) | E::Io(_) => CliError::Other(msg),
        }
    }
}
