use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("resolution too coarse: M = {m} but band limit K = {k} needs M >= {}", 4 * k)]
    ResolutionTooCoarse { m: usize, k: usize },

    #[error("diffusion coefficient is not positive at node {node} (value {value:e})")]
    Coercivity { node: usize, value: f64 },

    #[error("linear solver failed: non-positive pivot at row {row} (condition estimate {condition:e})")]
    SolverFailure { row: usize, condition: f64 },

    #[error("CFL condition violated: dt = {dt:e} exceeds the admissible {admissible:e}")]
    Stability { dt: f64, admissible: f64 },

    #[error("wave solution blew up at step {step}")]
    BlowUp { step: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("rank deficient fit: {0}")]
    Rank(String),

    #[error("training diverged at epoch {epoch}")]
    TrainingDiverged { epoch: usize },

    #[error("objective is not finite")]
    NonFinite,

    #[error("line search stalled after {trials} trials (best value {best_value:e})")]
    LineSearchStall {
        trials: usize,
        best_value: f64,
        best_x: Vec<f64>,
    },

    #[error("sample {index}: {source}")]
    Sample {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Innermost error, skipping context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } | Error::Sample { source, .. } => source.root(),
            other => other,
        }
    }

    /// Process exit code: 2 configuration, 3 numerical failure, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::Config(_) => 2,
            Error::Io(_) | Error::Json(_) | Error::Parse(_) => 4,
            _ => 3,
        }
    }
}
