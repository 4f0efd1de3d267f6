use std::path::PathBuf;

/// Failures surfaced by the command line, grouped by exit status.
#[derive(Debug, thiserror::Error)]
pub enum ViceError {
    #[error("config: {0}")]
    Config(String),
    #[error("{}: {msg}", path.display())]
    Data { path: PathBuf, msg: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: png: {source}", path.display())]
    PngDecode {
        path: PathBuf,
        #[source]
        source: png::DecodingError,
    },
    #[error("{}: png: {source}", path.display())]
    PngEncode {
        path: PathBuf,
        #[source]
        source: png::EncodingError,
    },
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Core(vice_core::Error),
}

pub type Result<T> = std::result::Result<T, ViceError>;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_OTHER: i32 = 1;

impl ViceError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ViceError::Io { path: path.into(), source }
    }

    pub fn data(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        ViceError::Data { path: path.into(), msg: msg.into() }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            ViceError::Config(_) => EXIT_CONFIG,
            ViceError::Data { .. } | ViceError::Io { .. } | ViceError::PngDecode { .. } | ViceError::PngEncode { .. } => EXIT_DATA,
            ViceError::Numeric(_) => EXIT_NUMERIC,
            ViceError::Core(e) => match e {
                vice_core::Error::NonFiniteLoss { .. } => EXIT_NUMERIC,
                vice_core::Error::InvalidArgument(_) => EXIT_CONFIG,
                vice_core::Error::Checkpoint(_) | vice_core::Error::ViewGeneration { .. } | vice_core::Error::ShapeMismatch { .. } => EXIT_DATA,
            },
        }
    }
}

impl From<vice_core::Error> for ViceError {
    fn from(e: vice_core::Error) -> Self {
        ViceError::Core(e)
    }
}
