use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("axis {axis} out of range for tensor of rank {rank}")]
    Axis { axis: usize, rank: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("loss variable does not belong to this tape")]
    ForeignVar,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("singular tridiagonal system: zero pivot at row {row}")]
    Singular { row: usize },

    #[error("CFL condition violated: max|u| = {max_speed} gives Courant number {courant} > 1")]
    Cfl { max_speed: f64, courant: f64 },

    #[error("Newton iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NewtonDiverged { iterations: usize, residual: f64 },

    #[error("non-finite state at step {step}")]
    NonFinite { step: usize },

    #[error("solver failed at step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("undefined metric: {0}")]
    UndefinedMetric(&'static str),

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },

    #[error("{failed} of {total} samples failed, above the 1% tolerance")]
    TooManyFailures { failed: usize, total: usize },

    #[error("artifact mismatch: {0}")]
    Mismatch(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn at_step(self, step: usize) -> Self {
        Error::Step {
            step,
            source: Box::new(self),
        }
    }

    pub(crate) fn format(path: impl AsRef<std::path::Path>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.as_ref().display().to_string(),
            reason: reason.into(),
        }
    }
}
