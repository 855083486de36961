//! Acoustic-to-word recognition at desk scale.
//!
//! The library trains a small frame encoder that emits, per audio frame,
//! one or more predicted word embeddings, two blank magnitudes, and a
//! (start, duration) timestamp per embedding.  Frames are scored against a
//! word embedding matrix by negated squared distance, pushed through a
//! softmax, and trained with a CTC objective; a second CTC stream over a
//! sampled timestamped vocabulary teaches the timestamp heads.  Decoding is
//! a prefix beam search with shallow LM fusion, a word-overlap gate, and
//! lattice / confusion-network output.
//!
//! `lab` holds numerical experiments that probe the scoring geometry
//! (softmax argmax locations, configuration score tables, distance
//! concentration, embedding collapse) and backs the `verify` subcommand.

pub mod config;
pub mod corpus;
pub mod ctc;
pub mod decoder;
pub mod lab;
pub mod lattice;
pub mod lm;
pub mod metrics;
pub mod model;
pub mod sampler;
pub mod scoring;
pub mod textio;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("{0}")]
    Invalid(String),
    #[error("line {line}: {what}")]
    Parse { line: usize, what: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn parse(line: usize, what: impl Into<String>) -> Self {
        Error::Parse { line, what: what.into() }
    }
}
