use std::io;

/// Errors raised anywhere in the pipeline.
///
/// Variants are grouped by the kind of contract that was broken so callers
/// (and the CLI's one-line error output) can report them uniformly.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("batch-size error: {0}")]
    BatchSize(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,
    #[error("sampling error: {0}")]
    Sampling(String),
    #[error("input-length error: {0}")]
    InputLength(String),
    #[error("normalization error: {0}")]
    Normalization(String),
    #[error("render error: {0}")]
    Render(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("load error: {0}")]
    Load(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    /// Short machine-readable tag used by the CLI.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Config(_) => "config",
            Error::BatchSize(_) => "batch_size",
            Error::Index(_) => "index",
            Error::Contract(_) => "contract",
            Error::TapeConsumed => "tape_consumed",
            Error::Sampling(_) => "sampling",
            Error::InputLength(_) => "input_length",
            Error::Normalization(_) => "normalization",
            Error::Render(_) => "render",
            Error::Protocol(_) => "protocol",
            Error::Load(_) => "load",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::Error::Dimension(format!($($arg)*)) };
}
pub(crate) use dim_err;
