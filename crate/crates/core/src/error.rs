use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Problems decoding one of the binary file formats (DNET, DBMP, IDX, CIFAR).
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: Vec<u8>, found: Vec<u8> },
    #[error("unsupported version {found} (expected {expected})")]
    UnsupportedVersion { expected: u32, found: u32 },
    #[error("file was written with the opposite byte order")]
    EndiannessMismatch,
    #[error("truncated input while reading {0}")]
    Truncated(String),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in layer `{layer}`: {detail}")]
    Shape { layer: String, detail: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("plan does not match model: {0}")]
    PlanMismatch(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(layer: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            layer: layer.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
