use thiserror::Error;

/// Errors produced by model construction, simulation, training and I/O.
#[derive(Error, Debug)]
pub enum SysidError {
    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch in block {block}: expected {expected}, found {found}")]
    DimensionMismatch {
        block: String,
        expected: String,
        found: String,
    },

    #[error("non-finite {what} at step {step}")]
    NonFinite { what: String, step: usize },

    #[error("output channel {channel} has zero variance; score undefined")]
    ZeroVariance { channel: usize },

    #[error("channel {channel} has zero standard deviation; cannot scale")]
    ZeroStd { channel: String },

    #[error("singular {what} at step {step}")]
    SingularMatrix { what: String, step: usize },

    #[error("all {n_starts} starts diverged: {diagnostics}")]
    AllStartsDiverged { n_starts: usize, diagnostics: String },

    #[error("optimizer diverged: {0}")]
    Diverged(String),

    #[error("malformed data at line {line}: {msg}")]
    MalformedData { line: usize, msg: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("serialization error: {0}")]
    Serialization(String),
}

pub type Result<T> = std::result::Result<T, SysidError>;
