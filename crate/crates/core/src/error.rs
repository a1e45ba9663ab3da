use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("bad magic in {path}: expected CGTN, found {found:?}")]
    BadMagic { path: PathBuf, found: [u8; 4] },
    #[error("unsupported tensor blob version {0}")]
    UnsupportedVersion(u32),
    #[error("malformed tensor blob: {0}")]
    MalformedBlob(String),
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("no instances found in foreground")]
    NoInstances,
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("infeasible scene: {0}")]
    Infeasible(String),
    #[error("layout correction stopped after {iterations} iterations at count {achieved} (target {target})")]
    IterationCap {
        iterations: usize,
        achieved: usize,
        target: usize,
        best: Box<crate::layout::InstanceLayout>,
    },
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
