use thiserror::Error;

pub type Result<T> = std::result::Result<T, GinotError>;

#[derive(Debug, Error)]
pub enum GinotError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("no attendable keys")]
    NoAttendableKeys,

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("degenerate domain: {0}")]
    DegenerateDomain(String),

    #[error("solver did not converge: relative residual {residual:e} after {iterations} iterations")]
    SolverDiverged { residual: f64, iterations: usize },

    #[error("container: {0}")]
    Container(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl GinotError {
    /// Short stable code used by the CLI when reporting failures.
    pub fn code(&self) -> &'static str {
        match self {
            GinotError::Shape(_) => "E_SHAPE",
            GinotError::NoAttendableKeys => "E_NO_KEYS",
            GinotError::NonScalarRoot(_) => "E_NON_SCALAR",
            GinotError::NonFiniteGradient(_) => "E_GRAD_NAN",
            GinotError::InvalidArgument(_) => "E_ARG",
            GinotError::IndexOutOfRange { .. } => "E_INDEX",
            GinotError::DegenerateDomain(_) => "E_DOMAIN",
            GinotError::SolverDiverged { .. } => "E_SOLVER",
            GinotError::Container(_) => "E_CONTAINER",
            GinotError::NonFiniteLoss { .. } => "E_LOSS_NAN",
            GinotError::Io(_) => "E_IO",
            GinotError::Json(_) => "E_JSON",
        }
    }
}

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(GinotError::Shape(msg.into()))
}
