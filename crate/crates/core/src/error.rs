use thiserror::Error;

/// Errors raised by the estimation library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("log of non-positive value {value} at ({row}, {col})")]
    Domain { row: usize, col: usize, value: f64 },

    #[error("index out of range: {0}")]
    Index(String),

    #[error("backward pass already run on this tape")]
    TapeConsumed,

    #[error("backward requires a 1x1 scalar, got {0:?}")]
    NotScalar((usize, usize)),

    #[error("non-finite gradient in `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite objective at iteration {iteration} (last good iteration: {last_good:?})")]
    NonFiniteObjective {
        iteration: usize,
        last_good: Option<usize>,
    },

    #[error("degenerate posterior: respondent {respondent}, coordinate {coord} has spread {spread:e}")]
    DegeneratePosterior {
        respondent: usize,
        coord: usize,
        spread: f64,
    },

    #[error("iteration {iteration} failed (last good iteration: {last_good:?}): {source}")]
    Training {
        iteration: usize,
        last_good: Option<usize>,
        source: Box<Error>,
    },

    #[error("quadrature supports at most 2 latent dimensions, got {0}")]
    UnsupportedDimension(usize),

    #[error("invalid value for `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("invalid data: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// True for failures caused by the numbers rather than by the inputs.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Training { source, .. } => source.is_numerical(),
            _ => matches!(
                self,
                Error::NonFiniteGradient(_) | Error::NonFiniteObjective { .. } | Error::DegeneratePosterior { .. }
            ),
        }
    }
}
