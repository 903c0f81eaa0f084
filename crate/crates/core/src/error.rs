use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("rank error: {0}")]
    Rank(String),
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("degenerate vector in {op}: row {row} has norm {norm:e}")]
    Degenerate {
        op: &'static str,
        row: usize,
        norm: f64,
    },
    #[error("value out of range: {0}")]
    Range(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("input too short: {frames} frames, tokenizer kernel is {kernel}")]
    InputTooShort { frames: usize, kernel: usize },
    #[error("capacity error: {queries} queries cannot cover {targets} targets")]
    Capacity { queries: usize, targets: usize },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("bad magic in {path}: expected {expected:?}, found {found:?}")]
    Magic {
        path: PathBuf,
        expected: [u8; 4],
        found: [u8; 4],
    },
    #[error("unsupported format version {found} in {path} (expected {expected})")]
    Version {
        path: PathBuf,
        expected: u32,
        found: u32,
    },
    #[error("truncated payload in {path}: {detail}")]
    Truncated { path: PathBuf, detail: String },
    #[error("task mismatch: {0}")]
    Task(String),
    #[error("refusing to overwrite non-empty directory {0} (use --force)")]
    Refused(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-parsable category used by the CLI on failure.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape { .. } | Error::Rank(_) => "shape",
            Error::Domain { .. } | Error::Degenerate { .. } | Error::NonFinite(_) => "numeric",
            Error::Range(_) | Error::Contract(_) | Error::Capacity { .. } => "contract",
            Error::Config(_) => "config",
            Error::Generation(_) | Error::InputTooShort { .. } => "data",
            Error::Magic { .. } | Error::Version { .. } | Error::Truncated { .. } => "format",
            Error::Task(_) => "task",
            Error::Refused(_) => "refused",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
