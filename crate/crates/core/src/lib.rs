//! Toolkit for measuring and improving the robustness of joint intent
//! classification and slot tagging models against paraphrases.
//!
//! The crate covers the whole workflow: corpus ingestion and synthetic data
//! generation ([`corpus`]), a biLSTM tagger on a small hand-written numeric
//! core ([`tensor`], [`tagger`]), paraphrase generation by back-translation
//! adapters, a noisy sequence autoencoder or rewrite rules ([`paraphraser`]),
//! logit-pairing losses ([`pairing`]), adversarial test-set construction with
//! double annotation ([`advset`]) and clean-vs-adversarial reporting
//! ([`report`], [`experiment`]).

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod advset;
pub mod corpus;
pub mod error;
pub mod experiment;
pub mod exec;
pub mod pairing;
pub mod paraphraser;
pub mod report;
pub mod seed;
pub mod tagger;
pub mod tensor;

pub use error::{Error, Result};
pub use exec::Execution;
