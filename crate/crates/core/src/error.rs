use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("line {line}: {message}")]
    MalformedRecord { line: u64, message: String },

    #[error("input contains no events")]
    EmptyInput,

    #[error("empty corpus: {0}")]
    EmptyCorpus(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("index {index} out of range for {what} of size {size}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),

    #[error("duplicate parameter name `{0}`")]
    DuplicateParameter(String),

    #[error("pseudo-label pool has {pool} candidates but {k} negatives were requested; lower K or use more items")]
    PoolTooSmall { pool: usize, k: usize },

    #[error("bad file format: {0}")]
    Format(String),

    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    NonFinite { epoch: usize, batch: usize, loss: f64 },
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> Self {
        Error::ShapeMismatch { op, lhs, rhs }
    }

    /// True for errors caused by the input data rather than the caller or the run.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Io(_)
                | Error::MalformedRecord { .. }
                | Error::EmptyInput
                | Error::EmptyCorpus(_)
                | Error::Format(_)
                | Error::IndexOutOfRange { .. }
                | Error::ShapeMismatch { .. }
        )
    }
}
