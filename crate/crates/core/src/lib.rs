//! Multi-level knowledge graph retrieval.
//!
//! A corpus of documents, sentence chunks and extracted triples is turned
//! into a three-level graph (entities, chunks, documents). A query-specific
//! graph neural network computes document representations conditioned on
//! the query, is trained contrastively on synthetic and annotated
//! question/document pairs, and ranks documents by cosine similarity.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod embed;
pub mod error;
pub mod grad;
pub mod graph;
pub mod model;
pub mod params;
pub mod retrieval;
pub mod seeds;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
