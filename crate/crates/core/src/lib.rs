//! Desk-scale non-autoregressive speech recognizer.
//!
//! A CTC-branched acoustic encoder emits per-frame token log-probabilities;
//! a modality conversion stage turns the frame sequence into a token-length
//! sequence of embeddings that a small bidirectional language model rescores;
//! the two logit streams are fused and decoded either greedily or with a
//! cache-based joint beam search that touches the model exactly once per
//! utterance.

pub mod ctc;
pub mod decoder;
pub mod error;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
pub use vocab::{TokenId, Vocabulary};
