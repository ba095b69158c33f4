//! Device-directed speech detection as prefix-conditioned generation with a
//! small decoder-only language model.

pub mod checkpoint;
pub mod clf;
pub mod config;
pub mod corpus;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod features;
pub mod modality;
pub mod model;
pub mod nn;
pub mod seed;
pub mod signals;
pub mod templates;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
