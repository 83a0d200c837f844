use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("requested TX time has already elapsed in local time")]
    PastDeadline,

    #[error("no arrival clears the leading-edge detection threshold")]
    NoDetectablePath,

    #[error("distance {0} m is below the 0.1 m minimum for the path model")]
    TooClose(f64),

    #[error("trim index {requested} outside [0, 31]")]
    TrimRangeExceeded { requested: i32 },

    #[error("CIR re-arrangement failed: no sample above the threshold outside the noise window")]
    RearrangeFailed,

    #[error("ToA estimate is invalid")]
    InvalidToa,

    #[error("need at least {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("degenerate anchor geometry (condition number {0:.3e})")]
    DegenerateGeometry(f64),

    #[error("trajectory segment {0} has non-positive speed")]
    ZeroSpeedSegment(usize),

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("invalid configuration: {0}")]
    Validation(String),

    #[error("corrupt record {index}: {message}")]
    CorruptRecord { index: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
