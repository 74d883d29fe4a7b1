use thiserror::Error;

/// Errors surfaced by the library. Variants are grouped by contract:
/// shape/degenerate-input errors come from tensor math, protocol errors
/// from the incremental-learning state machine, checkpoint errors from
/// the binary persistence layer.
#[derive(Debug, Error)]
pub enum DrlError {
    #[error("dimension mismatch in {op}: left shape {left:?}, right shape {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("degenerate input in {op}: {detail}")]
    DegenerateInput { op: &'static str, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("loss function is not deterministic: two evaluations at the same point disagree")]
    NonDeterministic,

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Checkpoint failures are named individually so callers can distinguish
/// a wrong file from a damaged one.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad checkpoint magic (expected \"DRLC\")")]
    BadMagic,

    #[error("unsupported checkpoint version {found} (this build reads version {expected})")]
    VersionMismatch { found: u16, expected: u16 },

    #[error("checkpoint truncated while reading {section}")]
    Truncated { section: &'static str },

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DrlError>;

impl DrlError {
    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        DrlError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
