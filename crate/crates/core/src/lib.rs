//! Extreme multilabel ranking with recursive linear models.
//!
//! The pipeline has three stages: label embeddings ([`embedding`]) feed a
//! recursive balanced B-ary clustering ([`indexing`]) that organizes the
//! label space into a chain of indexing matrices; a stack of shortlisted
//! one-vs-rest linear rankers is trained over that chain ([`trainer`],
//! [`solver`]); prediction walks the chain with beam search ([`inference`]).
//! Sparse storage and kernels live in [`sparse`], text featurization in
//! [`tfidf`], and ranking metrics in [`metrics`].

pub mod embedding;
pub mod error;
pub mod indexing;
pub mod inference;
pub mod metrics;
pub mod solver;
pub mod sparse;
pub mod tfidf;
pub mod trainer;

pub use error::{Error, Result};
pub use sparse::{CscMatrix, CsrMatrix, DoublySparseMatrix, SparseVec};
