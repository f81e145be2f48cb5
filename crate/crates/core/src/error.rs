use thiserror::Error;

pub type Shape = (usize, usize);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LabError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Shape,
        right: Shape,
    },
    #[error("{0}: sequence length must be at least 1")]
    EmptySequence(&'static str),
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("loss node must be 1x1, got {0:?}")]
    NonScalarLoss(Shape),
    #[error("affine hull is degenerate: augmented system is rank deficient (pivot {pivot:e})")]
    DegenerateHull { pivot: f64 },
    #[error("singular linear system (pivot {pivot:e} at column {column})")]
    Singular { column: usize, pivot: f64 },
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, LabError>;
