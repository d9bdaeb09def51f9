//! Configuration-driven runner for the fast-slow estimators and studies.

pub mod artifacts;
pub mod config;
pub mod run;

pub use artifacts::{Manifest, ManifestEntry};
pub use config::{parse_config, parse_config_str, CliOverrides, Command, RunConfig};
pub use run::run;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(#[from] fastslow::Error),
    #[error("numerical failure: {0}")]
    Failed(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 2 for configuration problems, 1 for everything that fails while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) | CliError::Failed(_) | CliError::Io(_) => 1,
        }
    }
}
