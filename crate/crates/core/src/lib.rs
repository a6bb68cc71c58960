//! Desk-scale laboratory for document-aware, temporally encoded language
//! models: autodiff tensors, tokenizer and corpus tooling, the attention and
//! regularisation layers, training and alignment loops, evaluation
//! statistics, a symbolic wargame adjudicator, and INT8 inference.

pub mod error;
pub mod eval;
pub mod tensor;

pub use error::{Error, Result};
pub mod attention;
pub mod cli;
pub mod corpus;
pub mod dedup;
pub mod diagnostics;
pub mod model;
pub mod probe;
pub mod profile;
pub mod quant;
pub mod strategic;
pub mod tokenizer;
pub mod train;
pub mod wargame;
