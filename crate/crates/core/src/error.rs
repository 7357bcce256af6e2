use thiserror::Error;

/// Failure modes shared by every module of the crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum StcError {
    #[error("unsupported dimension {0}: only d = 1 (interval) and d = 2 (disk) are implemented")]
    UnsupportedDimension(usize),

    #[error("invalid domain: {0}")]
    InvalidDomain(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("level mismatch: expected level {expected}, got {got}")]
    LevelMismatch { expected: usize, got: usize },

    #[error("tree depth {requested} outside [1, {max}]")]
    ResourceLimit { requested: usize, max: usize },

    #[error(
        "CFL violation: substep {substep:.6e} exceeds the admissible bound {bound:.6e} \
         (use at least {min_substeps} transport substeps per tree level)"
    )]
    Cfl {
        substep: f64,
        bound: f64,
        min_substeps: usize,
    },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("ratio undefined: terminal datum has zero energy")]
    UndefinedRatio,

    #[error("numerical breakdown: {0}")]
    NumericalBreakdown(String),

    #[error("singular Gramian: {0}")]
    SingularGramian(String),
}

pub type Result<T> = std::result::Result<T, StcError>;
