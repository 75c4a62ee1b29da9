use std::path::PathBuf;

/// Errors produced by every stage of the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("malformed matrix file at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("at least 2 frames required, got {0}")]
    InsufficientFrames(usize),

    #[error("at least 2 subjects required, got {0}")]
    InsufficientSubjects(usize),

    #[error("noise basis of subject {subject} has {available} rows, {required} required")]
    InsufficientNoise {
        subject: usize,
        available: usize,
        required: usize,
    },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("row {row} of {set} has zero variance")]
    DegenerateRow { set: &'static str, row: usize },

    #[error("cannot draw {requested} distinct half-splits, only {available} exist")]
    Combinatorics { requested: usize, available: u128 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// True for failures of the numerical core rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical(_))
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
