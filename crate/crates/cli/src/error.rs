use stc_core::StcError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] StcError),

    #[error("cannot write output: {0}")]
    Io(#[from] std::io::Error),

    #[error("cannot write output: {0}")]
    Csv(#[from] csv::Error),

    #[error("cannot encode summary: {0}")]
    Json(#[from] serde_json::Error),
}

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const PRECONDITION: i32 = 2;
    pub const NUMERICAL: i32 = 3;
    pub const USAGE: i32 = 64;
    pub const CONFIG: i32 = 65;
    pub const INTERNAL: i32 = 70;
    pub const IO: i32 = 74;
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => exit::CONFIG,
            CliError::Io(_) | CliError::Csv(_) => exit::IO,
            CliError::Json(_) => exit::INTERNAL,
            CliError::Core(e) => match e {
                StcError::Precondition(_) | StcError::Cfl { .. } => exit::PRECONDITION,
                StcError::NumericalBreakdown(_)
                | StcError::SingularGramian(_)
                | StcError::UndefinedRatio => exit::NUMERICAL,
                // bad values coming from the configuration
                StcError::UnsupportedDimension(_)
                | StcError::InvalidDomain(_)
                | StcError::InvalidParameter(_)
                | StcError::ResourceLimit { .. } => exit::CONFIG,
                StcError::Shape(_) | StcError::LevelMismatch { .. } => exit::INTERNAL,
            },
        }
    }
}
