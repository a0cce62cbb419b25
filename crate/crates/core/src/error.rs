use thiserror::Error;

/// Errors raised by the estimation pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum CaceError {
    #[error("singular system: {0}")]
    SingularSystem(String),

    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("domain error: {0}")]
    DomainError(String),

    #[error("non-binary value {value} in column `{column}` at row {row}")]
    NonBinary {
        column: String,
        row: usize,
        value: f64,
    },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("empty subset: {0}")]
    EmptySubset(String),

    #[error("learner contract violation: {0}")]
    LearnerContractViolation(String),

    #[error("positivity violation: {0}")]
    PositivityViolation(String),

    #[error("complier expert untrained: {0}")]
    ComplierExpertUntrained(String),

    #[error("too many failed bootstrap replicates: {failed} of {total}")]
    TooManyFailures { failed: usize, total: usize },

    #[error("zero denominator: {0}")]
    ZeroDenominator(String),

    #[error("no valid matching groups")]
    NoValidGroups,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("schema violation: {0}")]
    Schema(String),

    #[error("io error: {0}")]
    Io(String),
}

impl CaceError {
    /// Stable variant name, used for CLI diagnostics.
    pub fn name(&self) -> &'static str {
        match self {
            CaceError::SingularSystem(_) => "SingularSystem",
            CaceError::NonFinite(_) => "NonFinite",
            CaceError::DomainError(_) => "DomainError",
            CaceError::NonBinary { .. } => "NonBinary",
            CaceError::DegenerateData(_) => "DegenerateData",
            CaceError::EmptySubset(_) => "EmptySubset",
            CaceError::LearnerContractViolation(_) => "LearnerContractViolation",
            CaceError::PositivityViolation(_) => "PositivityViolation",
            CaceError::ComplierExpertUntrained(_) => "ComplierExpertUntrained",
            CaceError::TooManyFailures { .. } => "TooManyFailures",
            CaceError::ZeroDenominator(_) => "ZeroDenominator",
            CaceError::NoValidGroups => "NoValidGroups",
            CaceError::InvalidInput(_) => "InvalidInput",
            CaceError::Schema(_) => "Schema",
            CaceError::Io(_) => "Io",
        }
    }

    /// True for errors caused by malformed input data rather than a failed fit.
    pub fn is_schema_error(&self) -> bool {
        matches!(
            self,
            CaceError::Schema(_) | CaceError::NonBinary { .. } | CaceError::NonFinite(_)
        )
    }
}

impl From<std::io::Error> for CaceError {
    fn from(e: std::io::Error) -> Self {
        CaceError::Io(e.to_string())
    }
}

impl From<csv::Error> for CaceError {
    fn from(e: csv::Error) -> Self {
        CaceError::Schema(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CaceError>;
