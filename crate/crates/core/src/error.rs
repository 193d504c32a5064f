use thiserror::Error;

/// Errors raised anywhere in the engine, grouped by the kind of failure so the
/// command-line driver can map them onto stable exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("statistics error: {0}")]
    Statistics(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }

    /// Process exit code: 2 configuration, 3 data/format, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Index(_) | Error::Shape(_) => 2,
            Error::Geometry(_)
            | Error::Data(_)
            | Error::Format { .. }
            | Error::Io(_)
            | Error::Json(_)
            | Error::Statistics(_) => 3,
            Error::Numeric(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
