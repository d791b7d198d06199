//! Cross-vocabulary speculative decoding at desk scale.
//!
//! A small drafter proposes tokens in its own vocabulary; a translation
//! layer elevates the proposal into the target vocabulary through a direct
//! map and an online n-gram cache; the target verifies via rejection
//! sampling. Hybrid online distillation and an acceptance-prediction head
//! keep the drafter aligned and the draft length adaptive. A scenario
//! harness streams synthetic corpora and emits reproducible CSV/JSON
//! metrics.

pub mod adapt;
pub mod cache;
pub mod corpus;
pub mod engine;
pub mod error;
pub mod harness;
pub mod lm;
pub mod tokenizer;
pub mod translate;

pub use error::{Error, Result};
