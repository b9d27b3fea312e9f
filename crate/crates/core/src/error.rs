use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: left {left:?}, right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("non-finite value in {0}")]
    Numeric(String),
    #[error("unsupported character {ch:?} at offset {offset}")]
    Encoding { ch: char, offset: usize },
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token id {id} out of vocabulary range 0..{vocab}")]
    VocabIndex { id: u32, vocab: usize },
    #[error("empty sequence")]
    EmptySequence,
    #[error("zero-length hypothesis")]
    EmptyHypothesis,
    #[error("insufficient data: need {needed} samples, have {available}")]
    InsufficientData { needed: usize, available: usize },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("input length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("step {step} out of range 0..={max_steps}")]
    StepRange { step: usize, max_steps: usize },
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGrad(String),
    #[error("training diverged at step {step}")]
    Diverged { step: usize },
    #[error("prediction/reference id mismatch; missing ids {missing:?}")]
    Alignment { missing: Vec<u64> },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
