use thiserror::Error;

/// Errors raised across the torus, smoothing and driver layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum KamError {
    #[error("average of the right-hand side is {average:e}, above tolerance {tolerance:e}")]
    ZeroAverageViolation { average: f64, tolerance: f64 },
    #[error("small divisor |k.omega| = {divisor:e} at k = {k:?} is below the floor {floor:e}")]
    SmallDivisorUnderflow { k: Vec<i64>, divisor: f64, floor: f64 },
    #[error("strip majorant overflowed at rho = {rho}")]
    StripNormOverflow { rho: f64 },
    #[error("sigma = {sigma} must exceed n - 1 = {min}")]
    InvalidSigma { sigma: f64, min: f64 },
    #[error("frequency is resonant: k = {k:?} gives k.omega = 0")]
    ResonantFrequency { k: Vec<i64> },
    #[error("point outside the domain of the Hamiltonian: {0}")]
    DomainViolation(String),
    #[error("unknown built-in family `{0}`")]
    UnknownFamily(String),
    #[error("degenerate embedding: Gram condition number {cond:e} exceeds {limit:e}")]
    DegenerateEmbedding { cond: f64, limit: f64 },
    #[error("average of Lambda is singular (condition number {cond:e}, limit {limit:e})")]
    SingularLambdaAverage { cond: f64, limit: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("Newton step diverged: residual {before:e} -> {after:e}")]
    StepDiverged { before: f64, after: f64 },
    #[error("iteration budget of {max_iter} steps exhausted with residual {residual:e}")]
    BudgetExceeded { max_iter: usize, residual: f64 },
    #[error("drift bound violated: {0}")]
    DriftViolation(String),
    #[error("smallness conditions fail: {0}")]
    SmallnessFailed(String),
    #[error("Bernstein degree {degree} exceeds the cap {cap}")]
    DegreeOverflow { degree: usize, cap: usize },
    #[error("approximation stagnated at level {level}: distance {achieved:e} above threshold {threshold:e}")]
    Stagnation { level: usize, achieved: f64, threshold: f64 },
    #[error("approximant sequence exhausted: {0}")]
    ApproximantExhausted(String),
    #[error("ledger violation at k = {k}: {condition} measured {measured:e} against bound {bound:e}")]
    LedgerViolation { k: usize, condition: String, measured: f64, bound: f64 },
    #[error("convergence stalled at k = {k}: increment {increment:e} after {previous:e}")]
    ConvergenceStalled { k: usize, increment: f64, previous: f64 },
    #[error("orbit integration blew up at t = {t}")]
    IntegrationBlowup { t: f64 },
    #[error("expression error: {0}")]
    Expression(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
}

impl KamError {
    /// True for errors that mean the configured problem violates a hypothesis
    /// (as opposed to an internal failure).
    pub fn is_hypothesis_failure(&self) -> bool {
        matches!(
            self,
            KamError::SmallnessFailed(_)
                | KamError::ResonantFrequency { .. }
                | KamError::SmallDivisorUnderflow { .. }
                | KamError::InvalidSigma { .. }
                | KamError::DegenerateEmbedding { .. }
                | KamError::SingularLambdaAverage { .. }
                | KamError::ApproximantExhausted(_)
                | KamError::LedgerViolation { .. }
                | KamError::DriftViolation(_)
        )
    }
}

impl From<std::io::Error> for KamError {
    fn from(e: std::io::Error) -> Self {
        KamError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, KamError>;
