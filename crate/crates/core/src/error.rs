use std::path::PathBuf;

use thiserror::Error;

use crate::model::Violation;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("fields live on different grids")]
    GridMismatch,

    #[error("invalid coefficients: {}", format_violations(.0))]
    InvalidCoefficients(Vec<Violation>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical blow-up at t = {time}")]
    BlowUp { time: f64 },

    #[error("too few snapshots: need at least {needed}, got {actual}")]
    TooFewSnapshots { needed: usize, actual: usize },

    #[error("block support touches the periodic seam (relative mass {0:.3e} outside the central half)")]
    SeamContact(f64),

    #[error("space-time block is untapered; declare a temporal taper before transforming")]
    Untapered,

    #[error("empty fit band: {0}")]
    EmptyBand(String),

    #[error("malformed field dump {path}: {reason}")]
    MalformedDump { path: PathBuf, reason: String },

    #[error("unsupported field dump version {found} (this build reads version {supported})")]
    VersionMismatch { found: u32, supported: u32 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

fn format_violations(v: &[Violation]) -> String {
    v.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(", ")
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
