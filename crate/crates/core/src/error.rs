use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),

    #[error("corrupt file: {0}")]
    CorruptFile(String),

    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("mask is empty")]
    EmptyMask,

    #[error("no tumor labels present")]
    NoTumor,

    #[error("region is empty")]
    EmptyRegion,

    #[error("mesh is not closed: {0}")]
    OpenMesh(String),

    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("case {case_id}: {source}")]
    Case {
        case_id: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn in_case(self, case_id: impl Into<String>) -> Self {
        Error::Case {
            case_id: case_id.into(),
            source: Box::new(self),
        }
    }

    /// The innermost error, skipping any case wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Case { source, .. } => source.root(),
            other => other,
        }
    }
}
