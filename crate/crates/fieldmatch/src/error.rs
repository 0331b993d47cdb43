use thiserror::Error;

/// Error type shared across the library.
#[derive(Debug, Error)]
pub enum FieldMatchError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix not positive definite: smallest computed pivot {pivot:.3e} (jitter up to {max_jitter:.3e} applied)")]
    NotPositiveDefinite { pivot: f64, max_jitter: f64 },

    #[error("degenerate ensemble: centered ensemble is numerically zero")]
    DegenerateEnsemble,

    #[error("ill-conditioned projection: condition estimate {condition:.3e} exceeds tolerance")]
    IllConditionedProjection { condition: f64 },

    #[error("singular correlation matrix while fitting emulator{}", index.map(|i| format!(" {i}")).unwrap_or_default())]
    SingularCorrelation { index: Option<usize> },

    #[error("emulator fit failed: {0}")]
    FitFailure(String),

    #[error("rotation constraint infeasible: leading SVD vector explains {achieved:.4} of variance, below required {required:.4}")]
    ConstraintInfeasible { achieved: f64, required: f64 },

    #[error("terminal case: reconstruction error {r_w:.6e} exceeds threshold {threshold:.6e}; NROY space is empty for this basis")]
    TerminalCase { r_w: f64, threshold: f64 },

    #[error("weight norm mismatch: fast implausibility requires a precomputation built with W = sigma_e + sigma_eta")]
    NormMismatch,

    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, FieldMatchError>;
