use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty sequence")]
    EmptySequence,
    #[error("cannot split length {n} into {segments} non-empty segments")]
    DegenerateSplit { n: usize, segments: usize },
    #[error("length {len} is not a multiple of the step width {width}")]
    Alignment { len: usize, width: usize },
    #[error("reserved symbol {0} inside payload")]
    ReservedToken(u32),
    #[error("hypothesis has no end-of-sentence symbol")]
    Unterminated,
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("position {position} exceeds the maximum absolute position {max}")]
    PositionOverflow { position: i64, max: usize },
    #[error("decoder cursor {cursor} would exceed the maximum length {max}")]
    CursorOverflow { cursor: usize, max: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("token {token} outside vocabulary of size {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("no unmasked target slots in batch")]
    EmptyLoss,
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("non-finite loss {loss} at step {step}")]
    Diverged { step: usize, loss: f32 },
    #[error("schedule mismatch: {0}")]
    ScheduleMismatch(String),
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Numeric failures map to a distinct CLI exit code.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Diverged { .. } | Error::EmptyLoss)
    }
}
