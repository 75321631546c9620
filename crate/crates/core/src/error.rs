use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate point at sensor origin")]
    DegeneratePoint,

    #[error("invalid sensor config: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("point {index}: {source}")]
    AtPoint {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite coordinate")]
    NonFiniteCoordinate,

    #[error("non-finite density")]
    NonFiniteDensity,

    #[error("no density statistics")]
    NoStatistics,

    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },

    #[error("empty segment {0}")]
    EmptySegment(usize),

    #[error("invalid label {label} at index {index} ({classes} classes)")]
    InvalidLabel { index: usize, label: u32, classes: usize },

    #[error("class {0} absent from weights table")]
    MissingClassWeight(u32),

    #[error("unnormalized probabilities at row {row} (sum {sum})")]
    Unnormalized { row: usize, sum: f64 },

    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },

    #[error("truncated record at offset {offset}")]
    TruncatedRecord { offset: u64 },

    #[error("label count {found} does not match point count {expected}")]
    LabelCount { expected: usize, found: usize },

    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn at_point(index: usize, source: Error) -> Self {
        Error::AtPoint {
            index,
            source: Box::new(source),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
