//! Synonym-knowledge-enhanced reading for cloze-style idiom comprehension.
//!
//! Candidates are represented through their synonym graphs: each candidate
//! idiom attends over itself and its synonyms (multi-head graph attention),
//! and a sigmoid gate mixes the result with the passage-aware representation
//! before scoring. The crate also carries the literal-meaning-coverage
//! annotation statistics used to motivate the approach.

pub mod corpus;
pub mod embeddings;
pub mod encoder;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod linalg;
pub mod lmc_analysis;
pub mod params;
pub mod sker_model;
pub mod synonym_graph;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
