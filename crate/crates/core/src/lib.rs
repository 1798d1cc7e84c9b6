//! Knowledge-intensive query-focused summarization toolkit.
//!
//! The pipeline retrieves ≤100-word chunks for a query from a large corpus
//! ([`sparse`] BM25 or [`dense`] inner product), pools results for human
//! relevance judgment ([`annotation`]), prompts an LLM to write a query-focused
//! summary ([`controller`]), and scores both ends ([`retrieval_eval`],
//! [`rouge`]). [`experiment`] wires the stages together.

pub mod annotation;
pub mod controller;
pub mod corpus;
pub mod dense;
pub mod error;
pub mod experiment;
pub mod io;
pub mod qrels;
pub mod report;
pub mod retrieval_eval;
pub mod rouge;
pub mod run;
pub mod sparse;
pub mod tokenize;

pub use error::{Error, ErrorKind, Result};
