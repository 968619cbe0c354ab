use thiserror::Error;

/// Errors produced anywhere in the screening pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("parse error at `{token}`: {reason}")]
    Parse { token: String, reason: String },

    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("model shape error: {0}")]
    ModelShape(String),

    #[error("seed does not fit inside the image: {0}")]
    SeedOutOfBounds(String),

    #[error("no region: {0}")]
    NoRegion(String),

    #[error("degenerate texture: no horizontal pixel pair inside the mask")]
    DegenerateTexture,

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("undefined AUC: both classes must be present")]
    UndefinedAuc,

    #[error("stratification error: {0}")]
    Stratification(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("corpus quality error: {degenerate} of {total} rows are degenerate")]
    CorpusQuality { degenerate: usize, total: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
