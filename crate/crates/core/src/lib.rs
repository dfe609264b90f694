//! Multimodal recommendation with vision-language item enrichment and
//! information-aware fusion of textual and visual features over a
//! three-graph collaborative-filtering encoder.

pub mod autograd;
pub mod container;
pub mod corpus;
pub mod encoder;
pub mod enrichment;
pub mod error;
pub mod evaluator;
pub mod fingerprint;
pub mod fusion;
pub mod graphs;
pub mod io;
pub mod nn;
pub mod objectives;
pub mod projection;
pub mod sparse;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
