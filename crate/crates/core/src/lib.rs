//! A numerical lab for a simplified one-layer transformer (softmax attention
//! with a last-token query, followed by a ReLU MLP with a fixed averaging
//! read-out) trained on a synthetic subject/relation/answer corpus.
//!
//! The crate is split by concern:
//!
//! * [`corpus`]: orthogonal token embeddings and the pre-training, Q&A and
//!   fine-tuning datasets.
//! * [`model`]: forward pass and cross-entropy loss.
//! * [`grad`]: closed-form gradients and a finite-difference checker.
//! * [`optimize`]: full-batch gradient descent, full and rank-1 fine-tuning.
//! * [`metrics`]: extraction loss and the attention / MLP feature probes.
//! * [`io`]: dataset, vocabulary and checkpoint file formats.

pub mod corpus;
pub mod error;
pub mod grad;
pub mod io;
pub mod metrics;
pub mod model;
pub mod optimize;
pub mod seed;

pub use error::{Error, Result};
