//! Crate-wide error type with the exit-code contract used by the CLI.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("malformed manifest row at line {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("dangling reference at line {line}: {path}")]
    DanglingReference { line: usize, path: PathBuf },
    #[error("class {0} has no samples")]
    EmptyClass(u8),
    #[error("mask has no foreground pixels")]
    EmptyMask,
    #[error("window {window:?} exceeds feature map dims {dims:?}")]
    WindowTooLarge {
        window: (usize, usize),
        dims: (usize, usize),
    },
    #[error("degenerate crop rectangle: {0}")]
    DegenerateCrop(String),
    #[error("shape error: {0}")]
    ShapeError(String),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("batch size mismatch: {0}")]
    BatchMismatch(String),
    #[error("non-finite loss at step {step}: {value}")]
    NonFiniteLoss { step: usize, value: f64 },
    #[error("unknown layer id: {0}")]
    UnknownLayer(String),
    #[error("too few samples: got {got}, need at least {need}")]
    TooFewSamples { got: usize, need: usize },
    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("archive format error: {0}")]
    Archive(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Exit-code contract: 0 success, 2 config error, 3 data error,
    /// 4 runtime numeric error, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::MissingFile(_)
            | Error::MalformedRow { .. }
            | Error::DanglingReference { .. }
            | Error::EmptyClass(_)
            | Error::EmptyMask
            | Error::Io { .. }
            | Error::Image { .. }
            | Error::Archive(_) => 3,
            Error::NonFiniteLoss { .. } => 4,
            _ => 1,
        }
    }
}
