//! Unsupervised video summarisation: a chunk/stride recurrent frame scorer
//! with difference attention, trained adversarially with a variance
//! regulariser, plus temporal segmentation, key-shot selection and
//! F-score evaluation.

pub mod adversarial;
pub mod checkpoint;
pub mod config;
pub mod csnet;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod graph;
pub mod nn;
pub mod pipeline;
pub mod plot;
pub mod segment;
pub mod summarize;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
