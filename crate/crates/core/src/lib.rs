//! Language-model data augmentation: BPE, a small Transformer generator,
//! rule filters, Kneser-Ney n-grams and mixture interpolation.

pub mod bench;
pub mod corpus;
pub mod error;
pub mod generation;
pub mod interpolate;
pub mod filter;
pub mod neural;
pub mod ngram;
pub mod pipeline;
pub mod rng;
pub mod tokenizer;

pub use error::{Error, Result};
