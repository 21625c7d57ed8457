//! Corpus handling, synthetic data and run configuration.

pub mod config;
pub mod corpus;
pub mod special;
pub mod synth;
pub mod vocab;

pub use corpus::{encode_corpus, encode_document, CorpusDataset};
pub use vocab::Vocabulary;
