//! Answer sentence selection with distributional sentence models.
//!
//! Sentences are encoded from fixed word embeddings, either as a bag of
//! words or with a bigram convolution, and question/answer pairs are scored
//! by a bilinear matcher trained with AdaGrad. A small logistic regression
//! can fuse the matcher probability with word-overlap counts. Rankings are
//! scored by MAP and MRR.

pub mod cli;
pub mod combiner;
pub mod corpus;
pub mod embeddings;
pub mod encoders;
pub mod error;
pub mod matcher;
pub mod metrics;
pub mod trainer;

pub use error::{Error, Result};
