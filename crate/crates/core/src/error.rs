use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("matrix is singular or ill-conditioned (condition estimate {cond:e})")]
    Singular { cond: f64 },

    #[error("non-finite value produced in {0}")]
    Numeric(String),

    #[error("sensitivity sequencing error: expected step {expected}, got {got}")]
    Sequencing { expected: usize, got: usize },

    #[error("capacity guard: {what} = {got} exceeds limit {limit}")]
    Capacity {
        what: &'static str,
        limit: usize,
        got: usize,
    },

    #[error("invalid parameters: {0}")]
    Validation(String),

    #[error("format error at byte offset {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
