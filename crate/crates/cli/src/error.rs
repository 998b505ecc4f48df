use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] pointplanes::Error),

    /// An output directory already holds files.
    #[error("{} is not empty (pass --force to overwrite)", .0.display())]
    Exists(PathBuf),

    /// A config document is malformed or inconsistent.
    #[error("{0}")]
    Config(String),

    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Exists(_) => "exists",
            CliError::Config(_) => "config",
            CliError::Usage(_) => "usage",
        }
    }

    /// `error: kind=<kind> msg=<message>` on a single line.
    pub fn line(&self) -> String {
        let msg: String = self
            .to_string()
            .chars()
            .map(|c| if c == '\n' || c == '\r' { ' ' } else { c })
            .collect();
        format!("error: kind={} msg={}", self.kind(), msg)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}
