use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("integral diverges: alpha = {alpha} must exceed 2/N = {bound}")]
    NonIntegrable { alpha: f64, bound: f64 },
    #[error("mu = {mu} is below the largeness threshold {threshold}")]
    BelowThreshold { mu: f64, threshold: f64 },
    #[error("step size underflow at {at}")]
    StepSizeUnderflow { at: f64 },
    #[error("step budget of {0} exhausted")]
    TooManySteps(usize),
    #[error("window too short: no plateau up to {0}")]
    WindowTooShort(f64),
    #[error("fixed-point iteration did not contract (ratio {0})")]
    ContractionFailed(f64),
    #[error("root find diverged: {0}")]
    RootFindDiverged(String),
    #[error("domain mismatch: {0}")]
    DomainMismatch(String),
    #[error("regime mismatch: {0}")]
    RegimeMismatch(String),
    #[error("asymptotic classification undetermined: {0}")]
    Undetermined(String),
    #[error("bracket not found: {0}")]
    BracketNotFound(String),
    #[error("peak of |L| on the interval is {peak}, below the target {target}")]
    PeakBelowTarget { peak: f64, target: f64 },
    #[error("blowup detected at t = {0}")]
    BlowupDetected(f64),
    #[error("io: {0}")]
    Io(String),
}

impl Error {
    /// Variant name, used verbatim in CLI diagnostics.
    pub fn name(&self) -> &'static str {
        match self {
            Error::InvalidParams(_) => "InvalidParams",
            Error::NonIntegrable { .. } => "NonIntegrable",
            Error::BelowThreshold { .. } => "BelowThreshold",
            Error::StepSizeUnderflow { .. } => "StepSizeUnderflow",
            Error::TooManySteps(_) => "TooManySteps",
            Error::WindowTooShort(_) => "WindowTooShort",
            Error::ContractionFailed(_) => "ContractionFailed",
            Error::RootFindDiverged(_) => "RootFindDiverged",
            Error::DomainMismatch(_) => "DomainMismatch",
            Error::RegimeMismatch(_) => "RegimeMismatch",
            Error::Undetermined(_) => "Undetermined",
            Error::BracketNotFound(_) => "BracketNotFound",
            Error::PeakBelowTarget { .. } => "PeakBelowTarget",
            Error::BlowupDetected(_) => "BlowupDetected",
            Error::Io(_) => "Io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
