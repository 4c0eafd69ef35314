use thiserror::Error;

pub type Result<T> = std::result::Result<T, LtmError>;

#[derive(Debug, Error)]
pub enum LtmError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("insufficient data: n = {n} must exceed q = {q}")]
    InsufficientData { n: usize, q: usize },

    #[error("singular instrument design: reciprocal condition number of W'W is {rcond:.3e}")]
    SingularDesign { rcond: f64 },

    #[error("empty risk set at event time {time}")]
    DegenerateRiskSet { time: f64 },

    #[error("could not bracket the transform root at event time {time}")]
    BracketFailure { time: f64 },

    #[error("no convergence after {iterations} iterations (score norm {score_norm:.3e}, beta {beta:?})")]
    NonConvergence {
        beta: Vec<f64>,
        score_norm: f64,
        iterations: usize,
    },

    #[error("solver stalled at iteration {iteration}: {reason}")]
    SolverStall { iteration: usize, reason: String },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("information matrix is numerically singular")]
    SingularInformation,

    #[error("covariance has non-positive diagonal {diagonal:?} (components: {components})")]
    InvalidCovariance {
        diagonal: Vec<f64>,
        components: String,
    },

    #[error("bootstrap unstable: {failed} of {total} refits failed")]
    BootstrapInstability { failed: usize, total: usize },

    #[error("censoring calibration failed: {0}")]
    Calibration(String),

    #[error("study quality: convergence rate {rate:.4} below 0.95 ({failed} of {total} replicates failed)")]
    StudyQuality {
        rate: f64,
        failed: usize,
        total: usize,
    },

    #[error("row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("report format error: {0}")]
    Format(String),
}

impl LtmError {
    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            LtmError::Domain(_)
            | LtmError::Shape(_)
            | LtmError::InvalidDataset(_)
            | LtmError::InsufficientData { .. }
            | LtmError::SingularDesign { .. }
            | LtmError::Parse { .. }
            | LtmError::Validation(_)
            | LtmError::Precondition(_) => 2,
            LtmError::Io(_) | LtmError::Format(_) => 4,
            _ => 3,
        }
    }
}
