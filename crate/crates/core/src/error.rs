use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown model `{0}`")]
    UnknownModel(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("latent value w = {w} lies outside the likelihood domain ({lo}, {hi})")]
    OutOfDomain { w: f64, lo: f64, hi: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-integrable score moment: {0}")]
    NonIntegrable(String),

    #[error("probability {p} outside [0, 1] while sampling entry ({i}, {j})")]
    ProbabilityOutOfRange { p: f64, i: usize, j: usize },

    #[error("likelihood `{0}` is not a normalized density and cannot be sampled")]
    NotSampleable(String),

    #[error("ratio of component {index} is incomparable ({num} / {den})")]
    Incomparable { index: usize, num: f64, den: f64 },

    #[error("equivalence check needs matching score classes: {0}")]
    ClassMismatch(String),

    #[error("no point of the parameter space satisfies the shell constraints")]
    EmptyShell,

    #[error("exact enumeration over {configs} configurations exceeds the limit of {limit}")]
    TooLarge { configs: f64, limit: usize },

    #[error("overlaps (S={s}, M={m}) lie outside the effective domain")]
    DomainViolation { s: f64, m: f64 },

    #[error("invalid ansatz: {0}")]
    InvalidAnsatz(String),

    #[error("eigensolver did not converge (residual {residual:.3e})")]
    EigenNonConvergence { residual: f64 },

    #[error("malformed matrix file: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("records do not match the prediction: {0}")]
    MismatchedKeys(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name: name.to_string(),
        reason: reason.into(),
    }
}
