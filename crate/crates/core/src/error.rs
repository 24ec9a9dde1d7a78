use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid round count {0}: expected 1..=22")]
    InvalidRoundCount(usize),
    #[error("invalid key {0:?}: expected 8 hex bytes")]
    InvalidKey(String),
    #[error("cannot CBC-process an empty message")]
    EmptyMessage,
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {found} (supported: {supported})")]
    UnsupportedVersion { found: u16, supported: u16 },
    #[error("truncated payload: {0}")]
    Truncated(String),
    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("incompatible inputs: {0}")]
    Incompatible(String),
    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Divergence {
        epoch: usize,
        step: usize,
        loss: f64,
    },
    #[error("labels contain a single class; need both classes present")]
    DegenerateLabels,
    #[error("zero samples evaluated")]
    EmptyEvaluation,

    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("metadata encoding: {0}")]
    Json(#[from] serde_json::Error),
}
