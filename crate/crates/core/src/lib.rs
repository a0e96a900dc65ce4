//! Post-pretraining of single-cell gene-token encoders with prototype,
//! lineage and Gaussian-mixture regularizers, plus the synthetic data,
//! evaluation and long-tail tooling around it.

pub mod checkpoint;
pub mod datagen;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod graph;
pub mod longtail;
pub mod losses;
pub mod model;
pub mod ontology;
pub mod params;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
