use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("blank silhouette")]
    BlankSilhouette,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: cannot decode image: {message}")]
    Image { path: PathBuf, message: String },

    #[error("unknown dataset layout `{0}` (expected casia-b or ou-mvlp)")]
    UnknownLayout(String),

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("protocol `{protocol}` is missing sequences: {}", missing.join(", "))]
    MissingSequences {
        protocol: String,
        missing: Vec<String>,
    },

    #[error("not a checkpoint")]
    NotACheckpoint,

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("truncated checkpoint: {0}")]
    Truncated(&'static str),

    #[error("unknown parameter path `{0}`")]
    UnknownParameter(String),

    #[error("parameter `{path}` has shape {found:?} but the architecture expects {expected:?}")]
    ParameterShape {
        path: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("missing parameter `{0}`")]
    MissingParameter(String),

    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
