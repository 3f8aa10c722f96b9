use thiserror::Error;

/// Errors produced anywhere in the pipeline.
///
/// The variants are grouped so that a driver can map them onto distinct exit
/// codes: configuration problems, malformed data, and numerical failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {op} got {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("degenerate mask: {0}")]
    DegenerateMask(String),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("label error: {0}")]
    Label(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: usize, message: String },
    #[error("data error: {0}")]
    Data(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Coarse failure classes used by drivers for exit-code mapping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numerical,
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) => ErrorClass::Config,
            Error::NonFinite { .. } => ErrorClass::Numerical,
            Error::Format { .. } | Error::Data(_) | Error::Io { .. } | Error::Json(_) => {
                ErrorClass::Data
            }
            Error::Label(_) => ErrorClass::Data,
            Error::Dimension { .. }
            | Error::Shape(_)
            | Error::DegenerateMask(_)
            | Error::Contract(_) => ErrorClass::Config,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
