use thiserror::Error;

/// Unified error type; variants are grouped by the stage that raises them.
#[derive(Debug, Error)]
pub enum LabError {
    // input / precision
    #[error("insufficient precision: {0}")]
    InsufficientPrecision(String),
    #[error("point outside [0,1]^d: {0}")]
    OutOfDomain(String),
    #[error("precondition violated: {0}")]
    PreconditionViolated(String),
    #[error("target function below 1 on queried region: {0}")]
    DomainViolation(String),
    #[error("big-integer budget exceeded at depth {achieved}: {msg}")]
    DepthOverflow { achieved: usize, msg: String },
    #[error("fewer than 3 usable generations in range: {0}")]
    RangeTooNarrow(String),

    // condition checks
    #[error("system truncation too shallow: {0}")]
    TruncationTooShallow(String),

    // construction
    #[error("no admissible seed cube: {0}")]
    NoSeed(String),
    #[error("delta band violation: {0}")]
    BandViolation(String),
    #[error("no admissible level below cap: {0}")]
    LevelNotFound(String),
    #[error("annulus admits no dyadic cube: {0}")]
    AnnulusTooThin(String),

    // verification
    #[error("measure scaling violation: {0}")]
    ScalingViolation(String),

    // cli
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl LabError {
    /// Process exit code bucket: 2 config, 3 construction, 4 verification.
    pub fn exit_code(&self) -> i32 {
        use LabError::*;
        match self {
            Config(_) | Io(_) => 2,
            ScalingViolation(_) => 4,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
