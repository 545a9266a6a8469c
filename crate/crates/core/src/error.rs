use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("field has {got} values, grid has {expected} nodes")]
    FieldSize { expected: usize, got: usize },

    #[error("non-finite value at node {node}")]
    NonFinite { node: usize },

    #[error("{0} is empty")]
    Empty(&'static str),

    #[error("point {index} lies outside the grid bounds")]
    PointOutOfBounds { index: usize },

    #[error("point {index} has {got} coordinates, expected {expected}")]
    PointDimension {
        index: usize,
        expected: usize,
        got: usize,
    },

    #[error("negative density sample {value} at node {node}")]
    NegativeSample { node: usize, value: f64 },

    #[error("density has zero total mass")]
    ZeroMass,

    #[error("ill-conditioned mixture at node {node}: {reason}")]
    IllConditionedMixture { node: usize, reason: String },

    #[error("covariance matrix is not positive definite")]
    SingularCovariance,

    #[error("line search stagnated after {iterations} Newton iterations, residual norm {residual:e}")]
    Stagnation { iterations: usize, residual: f64 },

    #[error("Newton solver did not converge in {iterations} iterations, residual norm {residual:e}")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("population {k}: {source}")]
    Population {
        k: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("sparse least-squares solve failed: {0}")]
    LinearSolver(String),

    #[error("K = {k} exceeds the number of nodes with nonzero density ({available})")]
    TooManyComponents { k: usize, available: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("image: {0}")]
    Image(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
