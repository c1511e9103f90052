use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("frequency point {index} at {point:?} lies outside the band |k| <= {limit}")]
    PointOutOfBand {
        index: usize,
        point: [f64; 3],
        limit: f64,
    },

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("size mismatch: {0}")]
    SizeMismatch(String),

    #[error("invalid size: {0}")]
    InvalidSize(String),

    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("conjugate gradient did not converge: relative residual {residual:.3e} after {iterations} iterations")]
    CgNoConvergence { iterations: usize, residual: f64 },

    #[error("eigensolver did not converge: {0}")]
    EigNoConvergence(String),

    #[error("singular system: {0}")]
    SingularSystem(String),

    #[error("affinity graph is disconnected ({components} components)")]
    Disconnected { components: usize },

    #[error("node {0} has zero degree")]
    IsolatedNode(usize),

    #[error("dataset operators are not identities")]
    OperatorsNotIdentity,

    #[error("index {index} out of range for {len} items")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("ground-truth information is unavailable")]
    TruthUnavailable,

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format version mismatch in {path}: found {found}, expected {expected}")]
    FormatVersionMismatch {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("checksum mismatch in {0}")]
    ChecksumMismatch(PathBuf),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("missing artifact: {0}")]
    MissingArtifacts(PathBuf),

    #[error("config error: {0}")]
    Config(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Innermost error, looking through stage wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    /// Process exit code for the command-line driver.
    ///
    /// 2 for configuration problems, 3 for numerical non-convergence,
    /// 4 for I/O and file-format problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::Config(_) => 2,
            Error::CgNoConvergence { .. } | Error::EigNoConvergence(_) => 3,
            Error::Io { .. }
            | Error::FormatVersionMismatch { .. }
            | Error::ChecksumMismatch(_)
            | Error::Format { .. }
            | Error::MissingArtifacts(_) => 4,
            _ => 1,
        }
    }
}
