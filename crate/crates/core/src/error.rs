//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus: tokenizer training needs at least one string")]
    EmptyCorpus,

    #[error("symbol {0:?} is not in the tokenizer alphabet")]
    UnknownSymbol(char),

    #[error("unknown token id {0}")]
    UnknownTokenId(u32),

    #[error("invalid token id {id} for vocabulary of size {vocab_size}")]
    InvalidTokenId { id: u32, vocab_size: usize },

    #[error("distribution is sub-normalized; normalize or use the residual path before sampling")]
    SubNormalized,

    #[error("distribution sums to {0}, expected 1 within 1e-9")]
    NotNormalized(f64),

    #[error("teacher distribution has a zero at index {0} where the student is positive; floor the teacher first")]
    TeacherZero(usize),

    #[error("n-gram surface mismatch: draft sequence detokenizes to {draft:?} but target token surface is {target:?}")]
    SurfaceMismatch { draft: String, target: String },

    #[error("n-gram draft sequence must have length >= 2, got {0}")]
    NGramTooShort(usize),

    #[error("cache stats need tokens_processed > 0")]
    NoTokensProcessed,

    #[error("unsupported file version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("corrupt file: {0}")]
    CorruptFile(String),

    #[error("draft and target contexts detokenize to different text: {draft:?} vs {target:?}")]
    ContextMismatch { draft: String, target: String },

    #[error("proposal contains a token with zero elevated probability at position {0}")]
    ZeroProposalProb(usize),

    #[error("empty batch")]
    EmptyBatch,

    #[error("empty metrics: at least one decoding round is required")]
    EmptyMetrics,

    #[error("missing target data for loss mode: {0}")]
    MissingTargetData(&'static str),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
