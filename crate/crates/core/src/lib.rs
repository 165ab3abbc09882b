//! Automated counterfactual data augmentation.
//!
//! The pipeline starts from a single word-pair prompt describing a demographic
//! axis and proceeds in four stages:
//!
//! 1. [`subspace`]: train an attribute classifier on contextual embeddings of
//!    the prompt words and use it to discover further attribute words.
//! 2. [`flow`]: train an invertible flow that confines attribute information
//!    to its first `k` output dimensions, swap those dimensions to produce
//!    counterfactual embeddings, and decode them into word pairs
//!    ([`dictionary`] assembles and persists the result).
//! 3. [`rewrite`]: substitute dictionary words, then mask erratic tokens and
//!    infill them to obtain fluent parallel text.
//! 4. [`generator`]: fine-tune a sequence-to-sequence model on the parallel
//!    text with teacher forcing.
//!
//! [`eval`] holds fluency, transfer and fairness metrics.

pub mod autodiff;
pub mod checkpoint;
pub mod corpus;
pub mod dictionary;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod fixtures;
pub mod generator;
pub mod flow;
pub mod lm;
pub mod nn;
pub mod rewrite;
pub mod subspace;

pub use corpus::{Attribute, TokenizedCorpus, Tokenizer};
pub use error::{Error, Result};
