//! Command-line front end: experiment files, the runner and the catalog.

pub mod catalog;
pub mod config;
pub mod runner;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration or parameters; nothing was simulated.
    #[error("invalid configuration: {0}")]
    Validation(String),

    #[error("budget exceeded: {0}")]
    Budget(String),

    #[error("{0}")]
    Core(fbmlab::Error),

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl From<fbmlab::Error> for CliError {
    fn from(e: fbmlab::Error) -> Self {
        use fbmlab::Error as E;
        match e {
            E::Parameter(m) | E::Input(m) | E::Shape(m) => CliError::Validation(m),
            E::Budget(m) => CliError::Budget(m),
            other => CliError::Core(other),
        }
    }
}

impl CliError {
    /// Process exit code: 2 for invalid input, 3 for exceeded budgets and 1
    /// for anything that went wrong while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Budget(_) => 3,
            _ => 1,
        }
    }
}
