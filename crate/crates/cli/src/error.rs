//! CLI error type carrying the process exit code.

use std::fmt;

/// Exit codes: 2 config, 3 data/schema, 4 numeric or training failure.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    /// Maps a core error onto the data/numeric split.
    pub fn from_core(err: deepgp::Error) -> Self {
        use deepgp::Error as E;
        match err {
            E::SchemaMismatch(_)
            | E::EmptyAfterFiltering
            | E::LengthMismatch { .. }
            | E::Io(_)
            | E::Csv(_)
            | E::TooFewPoints { .. }
            | E::TooManyPoints { .. }
            | E::EmptyBatch
            | E::Empty => CliError::Data(err.to_string()),
            E::ArchitectureInvalid(_) | E::KTooLarge { .. } | E::InfeasibleSplit(_) => {
                CliError::Config(err.to_string())
            }
            _ => CliError::Numeric(err.to_string()),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numeric(m) => write!(f, "training/numeric error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

pub type CliResult<T> = Result<T, CliError>;
