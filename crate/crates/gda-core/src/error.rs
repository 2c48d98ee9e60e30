//! Error taxonomy shared by every module.
//!
//! Variants are grouped by where they originate so the CLI can map them onto
//! process exit codes without string matching: configuration and input
//! problems, shape/index violations from the kernels, file-format problems,
//! and numeric failures detected at run time.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GdaError {
    /// Operand shapes are incompatible for `op`. Both shapes are named so the
    /// message is actionable without a debugger.
    #[error("shape mismatch in {op}: left operand {lhs:?} vs right operand {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{what} index {index} out of range (must be < {bound})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing config key `{0}`")]
    MissingKey(String),

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("bad value for config key `{key}`: {msg}")]
    BadValue { key: String, msg: String },

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    OverLength { len: usize, max: usize },

    #[error("softmax row {row} has no unmasked entries")]
    AllMasked { row: usize },

    #[error("non-finite value produced at stage `{stage}`")]
    NonFinite { stage: String },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("checkpoint is {found} but {expected} was requested")]
    PrecisionMismatch {
        expected: &'static str,
        found: &'static str,
    },

    #[error("invalid growth plan: {0}")]
    Plan(String),

    #[error("vocabulary size mismatch: {a} vs {b}")]
    VocabMismatch { a: usize, b: usize },

    #[error("corpus too small: {got} tokens, but one training window needs {needed}")]
    CorpusTooSmall { needed: usize, got: usize },

    #[error("no sequences available for {0}")]
    EmptySplit(&'static str),

    #[error("training aborted at step {step}: non-finite loss (last saved checkpoint: {})",
            last_good.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "none".into()))]
    NonFiniteLoss {
        step: u64,
        last_good: Option<PathBuf>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GdaError>;
