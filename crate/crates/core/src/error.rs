use std::path::PathBuf;

use serde::Serialize;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },

    #[error("malformed series: {0}")]
    MalformedSeries(String),

    #[error("series too short: {0}")]
    TooShort(String),

    #[error("split too short: {0}")]
    SplitTooShort(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate channel {channel} ({name}): zero standard deviation on the train split")]
    DegenerateChannel { channel: usize, name: String },

    #[error("segment length {segment_len} exceeds context length {context_len}")]
    SegmentTooLong {
        segment_len: usize,
        context_len: usize,
    },

    #[error("empty prompt")]
    EmptyPrompt,

    #[error("embedding cache miss for prompt {prompt:?}")]
    CacheMiss { prompt: String },

    #[error("corrupt embedding cache: {0}")]
    CorruptCache(String),

    #[error("trace does not match parameters: {0}")]
    Trace(String),

    #[error("non-finite gradient in block {block} at index {index} (value {value})")]
    NonFiniteGradient {
        block: String,
        index: usize,
        value: f64,
    },

    #[error("invalid horizon {0}")]
    InvalidHorizon(i64),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable name of the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "IoError",
            Error::Parse { .. } => "ParseError",
            Error::MalformedSeries(_) => "MalformedSeries",
            Error::TooShort(_) => "TooShort",
            Error::SplitTooShort(_) => "SplitTooShort",
            Error::Shape(_) => "ShapeError",
            Error::DegenerateChannel { .. } => "DegenerateChannel",
            Error::SegmentTooLong { .. } => "SegmentTooLong",
            Error::EmptyPrompt => "EmptyPrompt",
            Error::CacheMiss { .. } => "CacheMiss",
            Error::CorruptCache(_) => "CorruptCache",
            Error::Trace(_) => "TraceError",
            Error::NonFiniteGradient { .. } => "NonFiniteGradient",
            Error::InvalidHorizon(_) => "InvalidHorizon",
            Error::Config(_) => "ConfigError",
            Error::Checkpoint(_) => "CheckpointError",
            Error::Json(_) => "JsonError",
        }
    }

    /// Structured form emitted on stderr by the command-line tool.
    pub fn to_report(&self) -> ErrorReport {
        ErrorReport {
            error: self.kind().to_string(),
            message: self.to_string(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ErrorReport {
    pub error: String,
    pub message: String,
}
