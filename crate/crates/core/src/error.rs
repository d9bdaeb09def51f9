use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {field}: expected {expected}, found {found}")]
    DimensionMismatch {
        field: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("nonpositive epsilon: {0}")]
    NonPositiveEpsilon(f64),

    #[error("invalid noise intensity {value}: {reason}")]
    InvalidDelta { value: f64, reason: &'static str },

    #[error("x-dependent fast drift for coupling class {0}")]
    XDependentFastDrift(&'static str),

    #[error("step dt={dt} exceeds stability limit {limit}")]
    StepTooLarge { dt: f64, limit: f64 },

    #[error("non-finite {what} at t={time}")]
    NonFinite { what: &'static str, time: f64 },

    #[error("burn-in {burn_in} must be shorter than the trajectory duration {duration}")]
    BurnInTooLong { burn_in: f64, duration: f64 },

    #[error("maximum lag {max_lag} exceeds a tenth of the available duration {duration}")]
    MaxLagTooLarge { max_lag: f64, duration: f64 },

    #[error("noise replicas must be at least 1 when delta > 0")]
    ZeroReplicas,

    #[error("deltas must be positive")]
    DeltasMustBePositive,

    #[error("empty trajectory")]
    EmptyTrajectory,

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("coupling class {found} not supported here (expected {expected})")]
    WrongCouplingClass {
        expected: &'static str,
        found: &'static str,
    },

    #[error("centering condition violated: residual {residual} exceeds {limit} (10 standard errors)")]
    CenteringViolated { residual: f64, limit: f64 },

    #[error("singular linear system: {0}")]
    Singular(String),

    #[error("cell problem: {0}")]
    CellProblem(String),

    #[error("sample of size {found} is below the minimum {min}")]
    UndersizedSample { found: usize, min: usize },

    #[error("negative time {0}")]
    NegativeTime(f64),

    #[error("ensemble member {index}: {source}")]
    Member {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown fixture {0:?}")]
    UnknownFixture(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for failures caused by the numerics (blow-up, singular solves) rather than bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NonFinite { .. } | Error::Singular(_) | Error::CenteringViolated { .. } => true,
            Error::Member { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
