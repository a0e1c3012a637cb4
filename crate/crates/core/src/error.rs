use std::path::PathBuf;

/// Crate-wide error type.
///
/// Variants map to the distinct failure classes of the pipeline: tensor
/// shape violations, contract violations (bad arguments rather than bad
/// shapes), numeric blow-ups, audio ingest problems, vocabulary misuse,
/// configuration mistakes, and I/O with file context.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("undefined loss: every target position is ignored")]
    UndefinedLoss,

    #[error("malformed WAV header: {0}")]
    MalformedWav(String),

    #[error("unsupported WAV codec: {0}")]
    UnsupportedCodec(String),

    #[error("truncated WAV data: {0}")]
    TruncatedWav(String),

    #[error("vocab error: {0}")]
    Vocab(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("sequence length {got} exceeds maximum {max}")]
    Length { got: usize, max: usize },

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
