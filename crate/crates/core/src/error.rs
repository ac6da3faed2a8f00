use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: cannot decode image: {message}")]
    Decode { path: PathBuf, message: String },

    #[error("{path}: no frames matching the pattern")]
    EmptyDirectory { path: PathBuf },

    #[error("{path}: frame is {found_w}x{found_h}, expected {expected_w}x{expected_h}")]
    MixedResolution {
        path: PathBuf,
        expected_w: usize,
        expected_h: usize,
        found_w: usize,
        found_h: usize,
    },

    #[error("size mismatch: {0}")]
    SizeMismatch(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("line {line}: unknown class label {label:?}")]
    UnknownLabel { line: u64, label: String },

    #[error("line {line}: box extent must be positive (w={w}, h={h})")]
    NonPositiveExtent { line: u64, w: f64, h: f64 },

    #[error("training data contains a single class")]
    SingleClass,

    #[error("empty input: {0}")]
    Empty(String),

    #[error("bad model blob: {0}")]
    Format(String),

    #[error("track {0} is dead")]
    DeadTrack(u64),

    #[error("frame {got} presented after frame {last}")]
    OutOfOrder { last: usize, got: usize },

    #[error("degenerate box ({w}x{h})")]
    DegenerateBox { w: f64, h: f64 },

    #[error("config: {0}")]
    Config(String),

    #[error("missing model: {0}")]
    MissingModel(String),

    #[error("stage {stage}: {source}")]
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

    /// Wraps an error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// True for errors caused by bad input data rather than a bug or environment failure.
    pub fn is_data_error(&self) -> bool {
        match self {
            Error::Io { source, .. } => matches!(
                source.kind(),
                std::io::ErrorKind::NotFound | std::io::ErrorKind::InvalidData
            ),
            Error::Stage { source, .. } => source.is_data_error(),
            _ => true,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
