use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("tape already consumed by a previous backward pass")]
    TapeReuse,

    #[error("degenerate batch in {op}: only {count} element(s) per channel in train mode")]
    DegenerateBatch { op: &'static str, count: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("label {label} out of range [0, {classes}) in {what}")]
    Label { what: &'static str, label: usize, classes: usize },

    #[error("batch composition error: {0}")]
    BatchComposition(String),

    #[error("training diverged: loss part `{part}` is {value}")]
    Divergence { part: String, value: f32 },

    #[error("ingestion error at row {row}: {detail}")]
    Ingestion { row: usize, detail: String },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("camera id {camera} at row {row} outside [0, {num_cameras})")]
    CameraRange { row: usize, camera: i64, num_cameras: usize },

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("format error at byte offset {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("evaluation protocol error: {0}")]
    Protocol(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: io::Error },
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { op, detail: detail.into() }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }
}
