use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("unknown bayer pattern `{0}`")]
    Pattern(String),
    #[error("state error: {0}")]
    State(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("frame index gap in {dir}: expected {expected}, found {found}")]
    Gap {
        dir: PathBuf,
        expected: u64,
        found: u64,
    },
    #[error("inconsistent sequence: {0}")]
    Consistency(String),
    #[error("metadata error: {0}")]
    Metadata(String),
    #[error("insufficient calibration data: {0}")]
    InsufficientData(String),
    #[error("calibration quality: {0}")]
    CalibrationQuality(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("pyramid error: {0}")]
    Pyramid(String),
    #[error("missing dependency: {0}")]
    Dependency(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("malformed file {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    /// Short stable identifier used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Pattern(_) => "pattern",
            Error::State(_) => "state",
            Error::Parameter(_) => "parameter",
            Error::Gap { .. } => "gap",
            Error::Consistency(_) => "consistency",
            Error::Metadata(_) => "metadata",
            Error::InsufficientData(_) => "insufficient_data",
            Error::CalibrationQuality(_) => "calibration_quality",
            Error::Config(_) => "config",
            Error::Pyramid(_) => "pyramid",
            Error::Dependency(_) => "dependency",
            Error::Checkpoint(_) => "checkpoint",
            Error::Format { .. } => "format",
            Error::Io { .. } => "io",
            Error::Tensor(_) => "tensor",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
