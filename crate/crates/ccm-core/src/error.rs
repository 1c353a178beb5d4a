use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An operator was given tensors whose extents do not fit its contract.
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("graph: {0}")]
    Graph(String),

    #[error("schedule: {0}")]
    Schedule(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("dataset: {0}")]
    Dataset(String),

    /// Training loop hit a non-finite loss; carries the diagnostics needed to
    /// reproduce the failing step.
    #[error(
        "non-finite loss {loss} at iteration {iteration} (n = {ns:?}, t-levels = {levels:?})"
    )]
    NonFiniteLoss {
        iteration: u64,
        loss: f64,
        ns: Vec<usize>,
        levels: Vec<f64>,
    },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }
}
