//! Clue-and-reasoning prompting for few-shot text classification.
//!
//! Pipeline: load a labeled corpus, generate clues and reasoning for the
//! training examples offline, retrieve the nearest demonstrations for each
//! test input, render a budget-limited prompt, sample several completions and
//! vote on the label.

pub mod augmenter;
pub mod corpus;
pub mod embedding_store;
pub mod eval;
pub mod inference;
pub mod llm_gateway;
pub mod prompting;
pub mod sampler;
