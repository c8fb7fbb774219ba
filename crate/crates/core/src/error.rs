//! Error types shared across the engine.

use thiserror::Error;

/// Unified error type for all engine operations.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration, rejected before a run starts.
    #[error("config: {0}")]
    Config(String),

    /// A recording or wire message violated its binary format.
    #[error("format: {reason} at byte offset {offset}")]
    Format { reason: String, offset: u64 },

    /// A recording ended mid-frame; complete frames before it were yielded.
    #[error("partial read: {reason} at byte offset {offset}")]
    PartialRead { reason: String, offset: u64 },

    /// Bad measurement data (non-finite sample, channel mismatch).
    #[error("data: {0}")]
    Data(String),

    /// Order-analysis failures: degenerate windows, insufficient pulses, coverage gaps.
    #[error("analysis: {0}")]
    Analysis(String),

    /// Local store failures.
    #[error("store: {0}")]
    Store(String),

    /// Replication link failures.
    #[error("net: {0}")]
    Net(String),

    /// Pipeline queue shut down while a producer still held frames.
    #[error("queue: {0}")]
    Queue(String),

    /// Runtime failure inside a pipeline activity.
    #[error("runtime: {0}")]
    Runtime(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable machine-parsable category slug, used by the CLI error prefix.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Format { .. } => "format",
            Error::PartialRead { .. } => "format",
            Error::Data(_) => "data",
            Error::Analysis(_) => "analysis",
            Error::Store(_) => "store",
            Error::Net(_) => "net",
            Error::Queue(_) => "queue",
            Error::Runtime(_) => "runtime",
            Error::Io(_) => "io",
        }
    }
}

impl From<rusqlite::Error> for Error {
    fn from(e: rusqlite::Error) -> Self {
        Error::Store(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
