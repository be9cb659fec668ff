use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch on axis {axis}: expected {expected}, got {got}")]
    Dim {
        op: &'static str,
        axis: usize,
        expected: usize,
        got: usize,
    },

    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: index {index} out of range for size {size}")]
    Index {
        op: &'static str,
        index: usize,
        size: usize,
    },

    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("oracle error: {0}")]
    Oracle(String),

    #[error("config error at `{path}`: {msg}")]
    Config { path: String, msg: String },

    #[error("dataset spec error: {0}")]
    Spec(String),

    #[error("checkpoint: bad magic")]
    BadMagic,

    #[error("checkpoint: unsupported format version {0}")]
    Version(u32),

    #[error("checkpoint: CRC mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Crc { stored: u32, computed: u32 },

    #[error("checkpoint: truncated or malformed ({0})")]
    Malformed(String),

    #[error("checkpoint: missing entry `{0}`")]
    MissingEntry(String),

    #[error("numeric abort at step {step}: {what}")]
    NumericAbort { step: u64, what: String },

    #[error("metric unavailable: {0}")]
    Unavailable(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Spec(_) => 2,
            Error::NumericAbort { .. } | Error::NonFinite { .. } => 3,
            Error::BadMagic
            | Error::Version(_)
            | Error::Crc { .. }
            | Error::Malformed(_)
            | Error::MissingEntry(_) => 4,
            _ => 1,
        }
    }
}
