use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported path (surface={surface}, bottom={bottom}); only the three-ray set is modelled")]
    UnsupportedPath { surface: u8, bottom: u8 },

    #[error("arrival at {arrival_s:.6} s plus pulse support exceeds the observation window of {window_s} s")]
    ObservationWindowExceeded { arrival_s: f64, window_s: f64 },

    #[error("empty sampling region")]
    EmptyRegion,

    #[error("non-finite value produced by node {node} ({op})")]
    NumericOverflow { node: usize, op: &'static str },

    #[error("time grid mismatch: {0}")]
    GridMismatch(String),

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("corrupt payload: {0}")]
    CorruptPayload(String),

    #[error("TOA initialization failed: {0}")]
    InitFailure(String),

    #[error("Fisher information is singular; geometry is unidentifiable")]
    UnidentifiableGeometry,

    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(PathBuf),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
